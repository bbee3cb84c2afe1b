"""Acceptance criteria, one test each. Every test prints one line:

    CRITERION <n>: PASS|FAIL <measured values>

and the lines are repeated in the pytest terminal summary. Run directly with
``python tests/test_acceptance.py`` for just these.
"""

import json
import math
import random
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bftinfer import codec  # noqa: E402
from bftinfer.certificate import verify_cert  # noqa: E402
from bftinfer.distance import Metric, select_quorum  # noqa: E402
from bftinfer.domain import InferenceResult, primary_index  # noqa: E402
from bftinfer.harness.accuracy import AccuracySpec, accuracy_experiment  # noqa: E402
from bftinfer.harness.bench import BenchSpec, bench_exec_batch, bench_strategies  # noqa: E402
from bftinfer.harness.faults import CATALOGUE  # noqa: E402
from bftinfer.harness.scenario import Scenario, check_run, run_scenario  # noqa: E402
from bftinfer.harness.workload import WorkloadSpec  # noqa: E402
from bftinfer.merkle import auth_path, build, get_merkle_root, path_matches  # noqa: E402

import conftest  # noqa: E402
import oracles  # noqa: E402
from mutations import mutate  # noqa: E402

# tolerances and sizes pinned from the criteria
MUTATIONS = 10_000
HONEST_RUNS = 1_000
C1_BUDGET = 60.0
QUORUM_INSTANCES = 1_000
C2_BUDGET = 30.0
SAFETY_SCENARIOS = 50
LIVENESS_TIMEOUTS = 10
SERIAL_SEEDS = 20
UPDATE_SHARE = 0.10
STRATEGY_RATIO = 1.5
BATCH_RATIO = 2.0
ACC_TRIALS = 10_000
ACC_SLACK = 0.005  # half a percentage point
C7_BUDGET = 120.0
PROPERTY_TRIALS = 10_000

# behaviours that only bite when the faulty node leads
PRIMARY_ONLY = {"equivocate", "mute_primary", "stale_version_primary"}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def test_criterion_1_certificate_soundness():
    t0 = time.perf_counter()
    res = run_scenario(Scenario(seed=1, workload=WorkloadSpec(requests=40, seed=1)))
    cases = [(p.request, p.response.results, p.response.certificate) for p in res.certified]
    rng = random.Random(1)
    accepted = 0
    for _ in range(MUTATIONS):
        req, results, cert = rng.choice(cases)
        (mreq, mres, mcert), _where = mutate(rng, req, results, cert)
        accepted += verify_cert(mreq, mres, mcert, res.keys, 1)

    verified = total = 0
    for seed in range(HONEST_RUNS):
        run = run_scenario(Scenario(seed=seed, workload=WorkloadSpec(requests=1, seed=seed), wire=False))
        for p in run.requests:
            total += 1
            resp = p.response
            verified += bool(p.certified and verify_cert(p.request, resp.results, resp.certificate, run.keys, 1))
    elapsed = time.perf_counter() - t0
    ok = accepted == 0 and total == HONEST_RUNS and verified == total and elapsed < C1_BUDGET
    report(1, ok, f"mutations accepted {accepted}/{MUTATIONS}; honest runs verified {verified}/{total}; "
                  f"{elapsed:.1f}s (< {C1_BUDGET:.0f}s)")


NAMES = {Metric.EUCLIDEAN: "euclidean", Metric.CHEBYSHEV: "chebyshev", Metric.MAX_MINUS_MIN: "max_minus_min"}


def _instance(rng, n, f, dim):
    present = sorted(rng.sample(range(n), rng.randint(n - f, n)))
    metric = rng.choice(list(NAMES) if dim == 1 else [Metric.EUCLIDEAN, Metric.CHEBYSHEV])
    # a tight honest cluster plus scattered points; coarse rounding makes ties common
    centre = [rng.uniform(-1, 1) for _ in range(dim)]
    res = {}
    for i in present:
        spread = 0.1 if rng.random() < 0.7 else 1.0
        res[i] = tuple(round(c + rng.gauss(0, spread), 2) for c in centre)
    eps = rng.choice([0.0, 0.1, 0.2, 0.3, 0.5, 1.0, math.inf])
    return res, metric, eps


def test_criterion_2_quorum_oracle():
    t0 = time.perf_counter()
    rng = random.Random(2)
    mismatches = checked = satisfied = 0
    for n in (4, 7, 10):
        f = (n - 1) // 3
        for dim in (1, 8):
            for _ in range(QUORUM_INSTANCES):
                res, metric, eps = _instance(rng, n, f, dim)
                got = select_quorum(res, n, f, metric, eps)
                want = oracles.quorum_oracle(res, n, f, NAMES[metric], eps)
                checked += 1
                if want is None:
                    mismatches += got.satisfied
                else:
                    satisfied += 1
                    mismatches += not (got.satisfied and got.selected == want[0])
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and checked == 6 * QUORUM_INSTANCES and elapsed < C2_BUDGET
    report(2, ok, f"{checked} instances (N in 4/7/10, scalar and 8-dim), {mismatches} mismatches, "
                  f"{satisfied} with a quorum; {elapsed:.1f}s (< {C2_BUDGET:.0f}s)")


def test_criterion_3_safety_catalogue():
    seeds = -(-SAFETY_SCENARIOS // len(CATALOGUE))
    unsafe, runs, sim_time = [], 0, 0.0
    for spec in CATALOGUE:
        for seed in range(seeds):
            node = 0 if spec.split(":")[0] in PRIMARY_ONLY else seed % 4
            sc = Scenario(seed=seed, behaviors={node: spec},
                          workload=WorkloadSpec(requests=20, update_fraction=UPDATE_SHARE, groups=2, seed=seed))
            res = run_scenario(sc)
            rep = check_run(res)
            runs += 1
            sim_time += res.time
            if not rep.safe:
                unsafe.append((spec, seed, rep.summary()))
    ok = not unsafe and runs >= SAFETY_SCENARIOS
    report(3, ok, f"{runs} scenarios ({len(CATALOGUE)} behaviours x {seeds} seeds), {len(unsafe)} unsafe "
                  f"{unsafe[:3]}; {sim_time:.1f}s simulated")


def test_criterion_4_liveness_faulty_primary():
    details, ok = [], True
    for spec in ("mute_primary", "stale_version_primary"):
        for seed in range(3):
            sc = Scenario(seed=seed, behaviors={0: spec},
                          workload=WorkloadSpec(requests=30, update_fraction=UPDATE_SHARE, seed=seed))
            res = run_scenario(sc)
            bound = LIVENESS_TIMEOUTS * sc.view_timeout
            reqs = res.requests
            in_time = [p for p in res.certified if p.request is not None and p.finished - p.started <= bound]
            first_nv = min((json.loads(e.body)["view"] for e in res.trace.of_kind("new_view")), default=None)
            rotated = first_nv == 1 and primary_index(1, res.config) == 1
            good = (res.status == "done" and res.view_changes() >= 1 and rotated
                    and len(in_time) == len(reqs) and check_run(res).safe)
            ok &= good
            details.append(f"{spec}/s{seed}: {len(in_time)}/{len(reqs)} in {bound:g}s, view {res.view_changes()}")
    report(4, ok, "; ".join(details))


def test_criterion_5_version_serializability():
    violations, certified, total, stuck = 0, 0, 0, 0
    for seed in range(SERIAL_SEEDS):
        sc = Scenario(seed=seed, workload=WorkloadSpec(requests=60, update_fraction=UPDATE_SHARE, groups=3, seed=seed),
                      honest_noise=0.001)
        res = run_scenario(sc)
        rep = check_run(res)
        violations += len(rep.version_violations) + len(rep.divergent_logs)
        certified += len(res.certified)
        total += len(res.requests)
        stuck += res.status != "done"
    ok = violations == 0 and certified == total and stuck == 0
    report(5, ok, f"{SERIAL_SEEDS} seeded runs at {UPDATE_SHARE:.0%} updates: {violations} violations, "
                  f"{certified}/{total} certified, {stuck} stuck")


def test_criterion_6_batching_benchmark():
    t0 = time.perf_counter()
    spec = BenchSpec()
    strat = bench_strategies(spec)
    batch = bench_exec_batch(spec)
    ok = strat["ratio"] >= STRATEGY_RATIO and batch["ratio"] >= BATCH_RATIO
    report(6, ok, f"execute/agree/attest {strat['execute_agree_attest_tps']:.0f}/s vs agree/execute "
                  f"{strat['agree_execute_tps']:.0f}/s = {strat['ratio']:.2f}x (>= {STRATEGY_RATIO}); "
                  f"batch 4 vs 1 {batch['batch4_tps']:.0f}/s vs {batch['batch1_tps']:.0f}/s = "
                  f"{batch['ratio']:.2f}x (>= {BATCH_RATIO}); {time.perf_counter() - t0:.0f}s wall")


def test_criterion_7_accuracy_under_dishonesty():
    t0 = time.perf_counter()
    rep = accuracy_experiment(AccuracySpec(trials=ACC_TRIALS))
    elapsed = time.perf_counter() - t0
    a = rep.honest >= rep.best_single - ACC_SLACK
    b = rep.beyond_excluded == 1.0
    c = rep.within >= rep.worst_single
    ok = a and b and c and elapsed < C7_BUDGET
    report(7, ok, f"(a) {'ok' if a else 'no'} honest {rep.honest:.4f} vs best single {rep.best_single:.4f}; "
                  f"(b) {'ok' if b else 'no'} beyond-eps excluded {rep.beyond_excluded:.2%}; "
                  f"(c) {'ok' if c else 'no'} within-eps {rep.within:.4f} vs worst single {rep.worst_single:.4f}; "
                  f"{ACC_TRIALS} trials, {elapsed:.1f}s")


def _random_result(rng):
    return InferenceResult(
        rng.randbytes(32), rng.randrange(16), rng.choice(["g", "clf", "grp-é"]) + str(rng.randrange(100)),
        rng.randrange(1, 10), tuple(rng.uniform(-1e3, 1e3) for _ in range(rng.randrange(0, 6))), rng.randbytes(32))


def _oracle_result_encoding(r):
    return (oracles.enc_bytes(r.request_id) + oracles.enc_u64(r.node_index) + oracles.enc_str(r.group_id)
            + oracles.enc_u64(r.group_version) + oracles.enc_floats(r.output) + oracles.enc_bytes(r.model_digest))


def test_criterion_8_merkle_and_codec_properties():
    rng = random.Random(8)
    codec_fail = 0
    values, encodings = set(), set()
    for _ in range(PROPERTY_TRIALS):
        r = _random_result(rng)
        data = codec.encode(r)
        codec_fail += codec.decode(data, InferenceResult) != r or data != _oracle_result_encoding(r)
        values.add(r)
        encodings.add(data)
    injective = len(values) == len(encodings)

    merkle_fail = 0
    for _ in range(PROPERTY_TRIALS):
        leaves = [rng.randbytes(rng.randrange(0, 12)) for _ in range(rng.randint(1, 64))]
        tree = build(leaves)
        i = rng.randrange(len(leaves))
        p = auth_path(tree, i)
        good = (tree.root == oracles.merkle_root(leaves) and get_merkle_root(p, leaves[i]) == tree.root
                and path_matches(p, len(leaves)) and len(p.siblings) == oracles.merkle_path_len(len(leaves), i))
        changed = list(leaves)
        changed[i] = leaves[i] + b"!"
        good &= build(changed).root != tree.root
        merkle_fail += not good
    ok = codec_fail == 0 and injective and merkle_fail == 0
    report(8, ok, f"codec {PROPERTY_TRIALS} round-trips {codec_fail} failures, injective {injective}; "
                  f"merkle {PROPERTY_TRIALS} trees {merkle_fail} failures")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
