import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from bftinfer.cli import EXIT_FAIL, EXIT_OK, EXIT_REFUSED, EXIT_USAGE, main


def cli(*argv, **kw):
    return subprocess.run([sys.executable, "-m", "bftinfer.cli", *argv], capture_output=True, text=True,
                          timeout=kw.pop("timeout", 60), **kw)


def free_block(n: int) -> int:
    """A base port with ``n`` free ports above it."""
    for _ in range(50):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            base = s.getsockname()[1]
        if base + n >= 65535:
            continue
        try:
            socks = []
            for i in range(n):
                t = socket.socket()
                socks.append(t)
                t.bind(("127.0.0.1", base + i))
            return base
        except OSError:
            continue
        finally:
            for t in socks:
                t.close()
    raise RuntimeError("no free port block")


def test_gen_keys_refuses_to_overwrite(tmp_path, capsys):
    assert main(["gen-keys", "--out", str(tmp_path)]) == EXIT_OK
    cfg = json.loads((tmp_path / "cluster.json").read_text())
    assert len(cfg["nodes"]) == 4 and cfg["f"] == 1
    assert main(["gen-keys", "--out", str(tmp_path)]) == EXIT_REFUSED
    assert main(["gen-keys", "--out", str(tmp_path), "--force"]) == EXIT_OK
    assert main(["gen-keys", "--out", str(tmp_path / "x"), "--n", "3"]) == EXIT_USAGE


def test_node_with_wrong_key_refuses(tmp_path):
    assert main(["gen-keys", "--out", str(tmp_path)]) == EXIT_OK
    key = str(tmp_path / "node-2.key")
    assert main(["node", "--config", str(tmp_path / "cluster.json"), "--index", "1", "--key", key]) == EXIT_REFUSED


def test_tampered_discovery_refused(tmp_path):
    assert main(["gen-keys", "--out", str(tmp_path)]) == EXIT_OK
    disc = tmp_path / "discovery.bin"
    data = bytearray(disc.read_bytes())
    data[len(data) // 2] ^= 1
    disc.write_bytes(bytes(data))
    rc = main(["client", "infer", "--config", str(tmp_path / "cluster.json"), "--group", "g", "--input", "[1]"])
    assert rc == EXIT_REFUSED


def test_bad_scenario_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"n": 4, "colour": "red"}))
    assert main(["harness", "run", "--scenario", str(path)]) == EXIT_USAGE


def test_harness_run_writes_trace(tmp_path, capsys):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"behaviors": {"0": "mute_primary"}, "workload": {"requests": 8},
                                "partitions": [{"start": 0, "end": 0.2, "side": [3]}]}))
    trace = tmp_path / "trace.hex"
    assert main(["harness", "run", "--scenario", str(path), "--seed", "2", "--trace", str(trace)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["safe"] and out["certified"] == 8 and out["view"] >= 1
    assert trace.read_text().count("\n") > 10


def test_harness_accuracy_and_bench(capsys):
    assert main(["harness", "accuracy", "--trials", "300"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["beyond_excluded"] == 1.0
    assert main(["harness", "bench", "--groups", "4", "--requests", "60", "--skip-batch"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["strategies"]["certified"] == [60, 60]


def wait_listening(ports, deadline=20.0):
    end = time.time() + deadline
    for port in ports:
        while True:
            try:
                socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
                break
            except OSError:
                if time.time() > end:
                    raise
                time.sleep(0.05)


@pytest.fixture
def live_cluster(tmp_path):
    base = free_block(4)
    r = cli("gen-keys", "--out", str(tmp_path), "--base-port", str(base), "--view-timeout", "2.0")
    assert r.returncode == 0, r.stderr
    procs = []
    for i in range(4):
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "bftinfer.cli", "node", "--config", str(tmp_path / "cluster.json"),
             "--index", str(i), "--state", str(tmp_path / f"state-{i}.json")],
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL))
    try:
        wait_listening([base + i for i in range(4)])
        yield tmp_path, procs
    finally:
        for p in procs:
            if p.poll() is None:
                p.send_signal(signal.SIGTERM)
        for p in procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()


def test_live_cluster_end_to_end(live_cluster):
    d, procs = live_cluster
    cfg = ["--config", str(d / "cluster.json")]
    env = dict(os.environ, BFTINFER_CLIENT_TIMEOUT="10")
    models = []
    for v in range(4):
        path = d / f"m{v}.bin"
        r = cli("owner", "make-model", "--out", str(path), "--seed", "1", "--variant", str(v), "--softmax")
        assert r.returncode == 0, r.stderr
        models.append(str(path))
    r = cli("owner", "define-group", *cfg, "--key", str(d / "owner.key"), "--group", "clf",
            "--models", *models, "--distance", "chebyshev:0.05", env=env)
    assert r.returncode == 0 and json.loads(r.stdout)["accepted"], r.stdout + r.stderr
    r = cli("owner", "activate", *cfg, "--key", str(d / "owner.key"), "--group", "clf", env=env)
    assert r.returncode == 0, r.stdout + r.stderr

    out = d / "answer"
    r = cli("client", "infer", *cfg, "--group", "clf", "--input", "[0.1, 0.2, 0.3, 0.4]",
            "--out", str(out), env=env)
    assert r.returncode == 0, r.stdout + r.stderr
    ans = json.loads(r.stdout)
    assert ans["certified"] and ans["outcome"] == "OK" and ans["group_version"] == 1
    assert len(ans["outputs"]) >= 3

    files = ["--cert", str(out / "cert.bin"), "--request", str(out / "request.bin"),
             "--results", str(out / "results.bin")]
    r = cli("client", "verify", *files, *cfg)
    assert r.returncode == EXIT_OK and json.loads(r.stdout)["valid"]
    cert = bytearray((out / "cert.bin").read_bytes())
    cert[-5] ^= 0x10
    (out / "cert.bin").write_bytes(bytes(cert))
    r = cli("client", "verify", *files, *cfg)
    assert r.returncode == EXIT_FAIL

    # SIGTERM flushes the node state and exits cleanly
    procs[3].send_signal(signal.SIGTERM)
    assert procs[3].wait(timeout=10) == 0
    state = json.loads((d / "state-3.json").read_text())
    assert state["clean_shutdown"] and state["last_ordered"] >= 3
    assert state["groups"] == {"clf@1": "ACTIVE"}
