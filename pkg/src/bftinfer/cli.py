"""Command-line entry point: ``bftinfer <command> ...``.

Exit codes:

* 0: success;
* 1: the operation ran but did not succeed (no certified answer, a
  certificate that does not verify, an unsafe simulation run);
* 2: bad usage or an invalid config file;
* 3: refused to start (key mismatch, discovery record that does not verify,
  files that would be overwritten without ``--force``).

``BFTINFER_VIEW_TIMEOUT`` overrides the view timeout of a node and
``BFTINFER_CLIENT_TIMEOUT`` the per-proxy timeout of a client, in seconds.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import random
import signal
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import codec
from .certificate import verify_cert, verify_failure_cert
from .client import Client, DiscoveryError, check_discovery, make_discovery
from .crypto import KeyPair
from .distance import DistanceDescriptor, Metric
from .domain import (
    ActivateGroup,
    ClusterConfig,
    DefineGroup,
    InferenceRequest,
    InferenceResult,
    NodeIdentity,
    RetireGroup,
)
from .inference import LinearToyModel, ModelStore, ToyExecutor
from .messages import Discovery, Endpoint, InferenceCertificate, InferResponse, OpAck, Outcome

log = logging.getLogger("bftinfer")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_REFUSED = 0, 1, 2, 3

_PARAMS = ("view_timeout", "exec_batch_max", "agree_batch_max", "agree_pipeline", "checkpoint_interval")


class Refused(Exception):
    """Startup refused; maps to exit code 3."""


class BadConfig(Exception):
    """Invalid config file; maps to exit code 2."""


# -- files ----------------------------------------------------------------------

def write_key(path: Path, key: KeyPair) -> None:
    path.write_text(key.private_bytes().hex() + "\n")
    os.chmod(path, 0o600)


def read_key(path) -> KeyPair:
    return KeyPair.from_private_bytes(bytes.fromhex(Path(path).read_text().strip()))


def load_config(path) -> tuple[ClusterConfig, dict]:
    """Parse a cluster file and validate it; returns the config and the raw JSON."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
        params = {k: raw.get("params", {})[k] for k in _PARAMS if k in raw.get("params", {})}
        if "BFTINFER_VIEW_TIMEOUT" in os.environ:
            params["view_timeout"] = float(os.environ["BFTINFER_VIEW_TIMEOUT"])
        nodes = tuple(
            NodeIdentity(bytes.fromhex(n["public_key"]), n["endpoint"], i) for i, n in enumerate(raw["nodes"])
        )
        config = ClusterConfig(nodes, int(raw["f"]), owners=tuple(bytes.fromhex(o) for o in raw.get("owners", ())),
                               **params)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise BadConfig(f"{path}: {exc}") from exc
    if raw.get("transport", "sockets") not in ("sockets", "sim"):
        raise BadConfig(f"{path}: transport must be 'sockets' or 'sim'")
    raw["_dir"] = str(path.parent)
    return config, raw


def _rel(raw: dict, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(raw["_dir"]) / p


def load_discovery(path, discovery_key_hex: str) -> Discovery:
    try:
        record = codec.decode(Path(path).read_bytes(), Discovery)
    except (OSError, ValueError) as exc:
        raise Refused(f"cannot read discovery record: {exc}") from exc
    try:
        return check_discovery(record, bytes.fromhex(discovery_key_hex))
    except (DiscoveryError, ValueError) as exc:
        raise Refused(str(exc)) from exc


# -- gen-keys -----------------------------------------------------------------

def cmd_gen_keys(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"node-{i}.key" for i in range(args.n)] + [
        "owner.key", "discovery.key", "client.key", "cluster.json", "discovery.bin"]
    clash = [n for n in names if (out / n).exists()]
    if clash and not args.force:
        raise Refused(f"refusing to overwrite {', '.join(clash)} in {out} (use --force)")
    if args.n < 3 * args.f + 1:
        raise BadConfig(f"N={args.n} cannot tolerate f={args.f}")
    keys = sorted((KeyPair.generate() for _ in range(args.n)), key=lambda k: k.public_key)
    owner, disc, client = KeyPair.generate(), KeyPair.generate(), KeyPair.generate()
    endpoints = [f"tcp://{args.host}:{args.base_port + i}" for i in range(args.n)]
    for i, k in enumerate(keys):
        write_key(out / f"node-{i}.key", k)
    write_key(out / "owner.key", owner)
    write_key(out / "discovery.key", disc)
    write_key(out / "client.key", client)
    record = make_discovery(disc, [Endpoint(ep, k.public_key) for ep, k in zip(endpoints, keys)], args.f)
    (out / "discovery.bin").write_bytes(codec.encode(record))
    cluster = {
        "f": args.f,
        "transport": "sockets",
        "nodes": [{"public_key": k.public_key.hex(), "endpoint": ep, "key_file": f"node-{i}.key"}
                  for i, (k, ep) in enumerate(zip(keys, endpoints))],
        "owners": [owner.public_key.hex()],
        "discovery_key": disc.public_key.hex(),
        "discovery_file": "discovery.bin",
        "params": {"view_timeout": args.view_timeout},
    }
    (out / "cluster.json").write_text(json.dumps(cluster, indent=2) + "\n")
    print(json.dumps({"dir": str(out), "nodes": args.n, "f": args.f, "discovery_key": disc.public_key.hex()}))
    return EXIT_OK


# -- node daemon ----------------------------------------------------------------

def node_state(node) -> dict:
    co = node.coordinator
    return {
        "index": node.index,
        "view": co.view,
        "last_ordered": co.last_ordered,
        "stable_seq": co.stable_seq,
        "state_digest": co.state_digest.hex(),
        "groups": {g.group_id + "@" + str(g.version): g.status.name for g in co.registry.all_groups()},
        "executed_items": node.executed_items,
    }


def write_state(path: Path, state: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


async def _serve_node(config, raw, index: int, key: KeyPair, state_path, trace_path, ready_cb=None) -> dict:
    from .harness.transport import LiveEnv
    from .node import Node

    discovery = None
    if raw.get("discovery_file") and raw.get("discovery_key"):
        discovery = load_discovery(_rel(raw, raw["discovery_file"]), raw["discovery_key"])
    peers = {n.index: (n.public_key, n.endpoint) for n in config.nodes}
    env = LiveEnv(key, peers, trace_file=trace_path)
    node = Node(config, index, key, env, ModelStore(), ToyExecutor(), discovery=discovery)
    node.coordinator.bootstrap([])
    env.handler = node.deliver
    await env.listen(config.nodes[index].endpoint)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(sig, stop.set)
    pump = loop.create_task(env.pump())
    log.info("node %d listening on %s", index, config.nodes[index].endpoint)
    if ready_cb:
        ready_cb()
    await stop.wait()
    pump.cancel()
    await env.close()
    state = node_state(node)
    state["clean_shutdown"] = True
    if state_path:
        write_state(Path(state_path), state)
    return state


def cmd_node(args) -> int:
    config, raw = load_config(args.config)
    if not 0 <= args.index < config.n:
        raise BadConfig(f"index {args.index} outside 0..{config.n - 1}")
    key_file = args.key or _rel(raw, raw["nodes"][args.index].get("key_file", f"node-{args.index}.key"))
    key = read_key(key_file)
    if key.public_key != config.nodes[args.index].public_key:
        raise Refused(f"key in {key_file} does not belong to node {args.index}")
    asyncio.run(_serve_node(config, raw, args.index, key, args.state, args.trace))
    return EXIT_OK


# -- client and owner -------------------------------------------------------------

def _client_timeout(args) -> float:
    return float(os.environ.get("BFTINFER_CLIENT_TIMEOUT", args.timeout))


def _discovery_from(args):
    if args.discovery:
        path, dkey = args.discovery, args.discovery_key
        if not dkey:
            raise BadConfig("--discovery needs --discovery-key")
    else:
        _config, raw = load_config(args.config)
        path, dkey = _rel(raw, raw["discovery_file"]), args.discovery_key or raw["discovery_key"]
    return load_discovery(path, dkey), dkey


async def _submit_live(key: KeyPair, record: Discovery, dkey: str, timeout: float, make_op):
    from .harness.transport import LiveEnv

    peers = {e.api_url: (e.public_key, e.api_url) for e in record.endpoints}
    node_keys = {e.public_key for e in record.endpoints}
    env = LiveEnv(key, peers, accept=lambda k: k in node_keys)
    client = Client.from_discovery(key, record, bytes.fromhex(dkey), env, timeout=timeout)
    env.handler = client.receive
    pump = asyncio.get_running_loop().create_task(env.pump())
    done = asyncio.get_running_loop().create_future()
    make_op(client, lambda p: done.done() or done.set_result(p))
    try:
        pending = await asyncio.wait_for(done, timeout * (record.f + 2))
    finally:
        pump.cancel()
        await env.close()
    return client, pending


def _read_values(arg: str) -> tuple[float, ...]:
    """Inline JSON, ``-`` for stdin, or a file holding a list or {"values": [...]}."""
    try:
        if arg == "-":
            text = sys.stdin.read()
        elif arg.lstrip().startswith(("[", "{")):
            text = arg
        else:
            text = Path(arg).read_text()
        data = json.loads(text)
        if isinstance(data, dict):
            data = data["values"]
        return tuple(float(v) for v in data)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise BadConfig(f"cannot read input values: {exc}") from exc


def cmd_client_infer(args) -> int:
    record, dkey = _discovery_from(args)
    key = read_key(args.key) if args.key else KeyPair.generate()
    values = _read_values(args.input)
    client, p = asyncio.run(_submit_live(
        key, record, dkey, _client_timeout(args),
        lambda c, cb: c.infer(args.group, values, args.epsilon, on_done=cb)))
    resp = p.response
    if not p.verified or not isinstance(resp, InferResponse):
        print(json.dumps({"certified": False, "tried": p.tried}))
        return EXIT_FAIL
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "request.bin").write_bytes(codec.encode(p.request))
        (out / "results.bin").write_bytes(codec.encode(tuple(resp.results), tuple[InferenceResult, ...]))
        (out / "cert.bin").write_bytes(codec.encode(resp.certificate))
    print(json.dumps({
        "certified": True,
        "outcome": Outcome(resp.outcome).name,
        "group_version": resp.group_version,
        "outputs": {r.node_index: list(r.output) for r in resp.results},
        "view": resp.certificate.view,
        "seq": resp.certificate.seq,
    }))
    return EXIT_OK


def cmd_client_verify(args) -> int:
    if args.config:
        config, _raw = load_config(args.config)
        keys, f = config.keys(), config.f
    else:
        record, _ = _discovery_from(args)
        keys, f = [e.public_key for e in record.endpoints], record.f
    try:
        req = codec.decode(Path(args.request).read_bytes(), InferenceRequest)
        cert = codec.decode(Path(args.cert).read_bytes(), InferenceCertificate)
        results = codec.decode(Path(args.results).read_bytes(), tuple[InferenceResult, ...])
    except (OSError, ValueError) as exc:
        print(json.dumps({"valid": False, "error": str(exc)}))
        return EXIT_FAIL
    if cert.outcome == Outcome.OK:
        ok = verify_cert(req, results, cert, keys, f)
    else:
        ok = not results and verify_failure_cert(req, cert, keys, f)
    print(json.dumps({"valid": ok, "outcome": Outcome(cert.outcome).name}))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_make_model(args) -> int:
    rng = random.Random(args.seed)
    base = LinearToyModel.random(rng, args.input_dim, args.output_dim, scale=1.0, softmax=args.softmax)
    vrng = random.Random(f"{args.seed}/{args.variant}")
    w = tuple(x + vrng.uniform(-args.spread, args.spread) for x in base.weights) if args.variant else base.weights
    model = LinearToyModel(args.input_dim, args.output_dim, w, base.bias, args.softmax)
    Path(args.out).write_bytes(model.to_bytes())
    print(json.dumps({"model_url": str(Path(args.out).resolve()), "digest": model.digest.hex()}))
    return EXIT_OK


def _owner_op(args, make) -> int:
    record, dkey = _discovery_from(args)
    key = read_key(args.key)
    nonce = args.nonce.encode() if args.nonce else os.urandom(8).hex().encode()
    op = make(key, nonce)
    _client, p = asyncio.run(_submit_live(key, record, dkey, _client_timeout(args),
                                          lambda c, cb: c.owner_op(op, on_done=cb)))
    resp = p.response
    ok = p.verified and isinstance(resp, OpAck)
    print(json.dumps({"accepted": ok, "detail": getattr(resp, "detail", "no answer")}))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_define_group(args) -> int:
    models = []
    for path in args.models:
        full = Path(path).resolve()
        models.append(LinearToyModel.from_bytes(full.read_bytes()).describe(str(full)))
    distance = DistanceDescriptor.parse(args.distance)
    return _owner_op(args, lambda key, nonce: DefineGroup(args.group, b"", nonce, b"", tuple(models), distance))


def cmd_activate(args) -> int:
    return _owner_op(args, lambda key, nonce: ActivateGroup(args.group, b"", nonce, b""))


def cmd_retire(args) -> int:
    return _owner_op(args, lambda key, nonce: RetireGroup(args.group, b"", nonce, b""))


# -- harness ---------------------------------------------------------------------

def _scenario_from(data: dict):
    from .harness.scenario import Scenario
    from .harness.simnet import LinkModel, Partition
    from .harness.workload import WorkloadSpec

    data = dict(data)
    if "workload" in data:
        wl = dict(data["workload"])
        if "metric" in wl:
            wl["metric"] = Metric[wl["metric"].upper()]
        data["workload"] = WorkloadSpec(**wl)
    if "link" in data:
        data["link"] = LinkModel(**data["link"])
    if "behaviors" in data:
        data["behaviors"] = {int(k): v for k, v in data["behaviors"].items()}
    if "partitions" in data:
        data["partitions"] = [Partition(p["start"], p["end"], frozenset(p["side"])) for p in data["partitions"]]
    known = {f.name for f in fields(Scenario)}
    unknown = set(data) - known
    if unknown:
        raise BadConfig(f"unknown scenario fields: {sorted(unknown)}")
    return Scenario(**data)


def cmd_harness_run(args) -> int:
    from .harness.scenario import check_run, run_scenario

    try:
        data = json.loads(Path(args.scenario).read_text())
    except (OSError, ValueError) as exc:
        raise BadConfig(str(exc)) from exc
    sc = _scenario_from(data)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    result = run_scenario(sc)
    report = check_run(result)
    if args.trace:
        Path(args.trace).write_text(result.trace.dump())
    print(json.dumps({
        "status": result.status,
        "time": round(result.time, 6),
        "requests": len(result.requests),
        "certified": len(result.certified),
        "view": result.view_changes(),
        "safe": report.safe,
        "oracle": report.summary(),
    }))
    return EXIT_OK if report.safe else EXIT_FAIL


def cmd_harness_bench(args) -> int:
    from .harness.bench import BenchSpec, bench_exec_batch, bench_strategies

    spec = BenchSpec(groups=args.groups, requests=args.requests, seed=args.seed)
    out = {"strategies": bench_strategies(spec)}
    if not args.skip_batch:
        out["exec_batch"] = bench_exec_batch(spec)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_harness_accuracy(args) -> int:
    from .harness.accuracy import AccuracySpec, accuracy_experiment

    spec = AccuracySpec(group_size=args.group_size, faulty=args.faulty, trials=args.trials, seed=args.seed)
    if args.epsilon is not None:
        spec = replace(spec, epsilon=args.epsilon)
    print(json.dumps(accuracy_experiment(spec).as_dict(), indent=2))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _add_discovery(p) -> None:
    p.add_argument("--config", default="cluster.json", help="cluster file naming the discovery record")
    p.add_argument("--discovery", help="signed discovery record (overrides --config)")
    p.add_argument("--discovery-key", help="trusted discovery public key, hex")
    p.add_argument("--timeout", type=float, default=5.0, help="per-proxy timeout in seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bftinfer", description="Byzantine fault tolerant inference serving")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-keys", help="create node, owner and discovery keys plus a cluster file")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--f", type=int, default=1)
    p.add_argument("--out", default=".")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--base-port", type=int, default=7100)
    p.add_argument("--view-timeout", type=float, default=1.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_keys)

    p = sub.add_parser("node", help="run one node")
    p.add_argument("--config", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--key", help="key file (default: the one named in the config)")
    p.add_argument("--state", help="write node state here on shutdown")
    p.add_argument("--trace", help="append trace events (JSON lines) here")
    p.set_defaults(fn=cmd_node)

    client = sub.add_parser("client", help="client tools").add_subparsers(dest="action", required=True)
    p = client.add_parser("infer")
    _add_discovery(p)
    p.add_argument("--group", required=True)
    p.add_argument("--input", required=True, help="JSON list of numbers, inline or in a file; - reads stdin")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--key", help="client key file (default: a fresh key)")
    p.add_argument("--out", help="directory for request.bin, results.bin and cert.bin")
    p.set_defaults(fn=cmd_client_infer)
    p = client.add_parser("verify")
    p.add_argument("--cert", required=True)
    p.add_argument("--request", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--config")
    p.add_argument("--discovery")
    p.add_argument("--discovery-key")
    p.set_defaults(fn=cmd_client_verify)

    owner = sub.add_parser("owner", help="model owner tools").add_subparsers(dest="action", required=True)
    p = owner.add_parser("make-model", help="write a random linear toy model file")
    p.add_argument("--out", required=True)
    p.add_argument("--input-dim", type=int, default=4)
    p.add_argument("--output-dim", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", type=int, default=0, help="nonzero: perturb the base weights")
    p.add_argument("--spread", type=float, default=0.002)
    p.add_argument("--softmax", action="store_true")
    p.set_defaults(fn=cmd_make_model)
    for name, fn in (("define-group", cmd_define_group), ("activate", cmd_activate), ("retire", cmd_retire)):
        p = owner.add_parser(name)
        _add_discovery(p)
        p.add_argument("--key", required=True, help="owner key file")
        p.add_argument("--group", required=True)
        p.add_argument("--nonce")
        if name == "define-group":
            p.add_argument("--models", nargs="+", required=True)
            p.add_argument("--distance", required=True, help="metric:epsilon, e.g. chebyshev:0.1")
        p.set_defaults(fn=fn)

    harness = sub.add_parser("harness", help="simulation experiments").add_subparsers(dest="action", required=True)
    p = harness.add_parser("run")
    p.add_argument("--scenario", required=True, help="JSON scenario file")
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", help="write the trace log here")
    p.set_defaults(fn=cmd_harness_run)
    p = harness.add_parser("bench")
    p.add_argument("--groups", type=int, default=24)
    p.add_argument("--requests", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-batch", action="store_true")
    p.set_defaults(fn=cmd_harness_bench)
    p = harness.add_parser("accuracy")
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--faulty", type=int, default=1)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_harness_accuracy)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except Refused as exc:
        print(f"bftinfer: refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except BadConfig as exc:
        print(f"bftinfer: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
