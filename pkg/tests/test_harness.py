import json
from dataclasses import replace

import pytest

from bftinfer.harness.accuracy import AccuracySpec, accuracy_experiment, ensemble_label
from bftinfer.harness.bench import BenchSpec, bench_exec_batch, run_strategy
from bftinfer.harness.faults import CATALOGUE, make_behavior
from bftinfer.harness.scenario import Scenario, check_run, run_scenario
from bftinfer.harness.simnet import LinkModel, Partition, SimNet, TraceLog
from bftinfer.harness.workload import WorkloadSpec, arrivals
from bftinfer.node import ZERO_COST, CostModel


def test_same_seed_same_trace():
    sc = Scenario(seed=4, behaviors={2: "drop_fraction:0.3"}, workload=WorkloadSpec(requests=15),
                  link=LinkModel(0.001, 0.002))
    a, b = run_scenario(sc), run_scenario(sc)
    assert a.trace.dump() == b.trace.dump()
    assert a.trace.dump() != run_scenario(replace(sc, seed=5)).trace.dump()


def test_trace_lines_parse_back():
    res = run_scenario(Scenario(workload=WorkloadSpec(requests=3)))
    events = TraceLog.parse(res.trace.dump())
    assert events == res.trace.events
    assert {"propose", "attest", "order", "certified"} <= {e.kind for e in events}
    assert all(isinstance(json.loads(e.body), dict) for e in events)


def test_simnet_timers_and_order():
    net = SimNet(0, LinkModel(0.01, 0.0), wire=False)
    got = []
    net.register("b", lambda src, msg: got.append((net.now(), msg)))
    net.send("a", "b", 1)
    net.send("a", "b", 2)
    t = net.schedule(0.005, lambda: got.append("timer"))
    net.schedule(0.001, t.cancel)
    net.run(1.0)
    assert [m for _, m in got] == [1, 2]
    assert got[0][0] == pytest.approx(0.01)


def test_partition_window_drops():
    net = SimNet(0, LinkModel(0.001, 0.0), wire=False)
    net.partitions = [Partition(0.0, 1.0, frozenset({"b"}))]
    got = []
    net.register("b", lambda src, msg: got.append(msg))
    net.send("a", "b", "lost")
    net.schedule(2.0, lambda: net.send("a", "b", "kept"))
    net.run(5.0)
    assert got == ["kept"] and net.dropped == 1


def test_workload_update_share():
    plan = arrivals(WorkloadSpec(requests=900, update_fraction=0.1, groups=3))
    kinds = [a.kind for a in plan]
    # an update is two ops (define and activate)
    ops = kinds.count("request") + 2 * kinds.count("update")
    assert 2 * kinds.count("update") / ops == pytest.approx(0.1, abs=0.01)
    assert all(b.time >= a.time for a, b in zip(plan, plan[1:]))


def test_catalogue_parses():
    for spec in CATALOGUE:
        make_behavior(spec)
    with pytest.raises(ValueError):
        make_behavior("gremlin")


def test_stuck_cluster_reports_deadlock():
    # two of four nodes cut off for good: no quorum can ever form
    cut = Partition(0.0, 1e9, frozenset({2, 3}))
    res = run_scenario(Scenario(workload=WorkloadSpec(requests=2), partitions=[cut], duration=30.0,
                                client_timeout=1e6))
    assert res.status in ("deadlock", "deadline")
    assert not res.certified


def test_cost_model():
    c = CostModel()
    assert c.cost(0) == 0.0
    assert c.cost(4) == pytest.approx(0.0032 + 4 * 0.0004)


SMALL = BenchSpec(groups=6, requests=200)


def test_without_compute_cost_strategies_are_close():
    spec = replace(SMALL, cost=ZERO_COST)
    a, b = run_strategy(spec, eager=True), run_strategy(spec, eager=False)
    assert a.certified == b.certified == spec.requests
    assert 0.9 <= a.tps / b.tps <= 1.1


def test_bigger_execution_batches_help():
    out = bench_exec_batch(SMALL)
    assert out["ratio"] > 1.5


def test_ensemble_label_rule():
    # two votes for label 1 beat one confident vote for label 0
    outs = [(0.1, 0.9), (0.4, 0.6), (0.99, 0.01)]
    assert ensemble_label(outs, f=1) == 1
    # no label has more than f votes: summed confidence decides
    assert ensemble_label([(0.6, 0.4), (0.1, 0.9)], f=1) == 1


def test_accuracy_small_run():
    rep = accuracy_experiment(AccuracySpec(trials=800))
    assert rep.beyond_excluded == 1.0
    assert rep.honest_within_eps == 1.0
    assert rep.honest >= rep.best_single - 0.03


def test_single_op_agreement_batches_hurt_both_orderings():
    full = [run_strategy(SMALL, eager=e) for e in (True, False)]
    single = [run_strategy(replace(SMALL, agree_batch_max=1), eager=e) for e in (True, False)]
    assert all(s.tps < f.tps for s, f in zip(single, full))
    assert single[0].tps > single[1].tps and full[0].tps > full[1].tps
