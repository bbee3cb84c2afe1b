"""Throughput of execute/agree/attest against agree/execute under a synthetic accelerator."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..node import CostModel
from .scenario import Scenario, run_scenario
from .simnet import LinkModel
from .workload import WorkloadSpec

# fixed cost = 8x per-item cost, so a batch of 4 runs about 3x faster per
# request than a batch of 1 (3.6 ms vs 1.2 ms per request)
CALIBRATED = CostModel(fixed=0.0032, per_item=0.0004, flush_delay=0.005)


@dataclass(frozen=True)
class BenchSpec:
    n: int = 4
    f: int = 1
    groups: int = 24
    requests: int = 1000
    rate: float = 5000.0  # offered load, well above capacity
    cost: CostModel = CALIBRATED
    exec_batch_max: int = 4
    agree_batch_max: int = 25
    agree_pipeline: int = 2
    link: LinkModel = field(default_factory=lambda: LinkModel(0.001, 0.0002))
    seed: int = 0


@dataclass(frozen=True)
class StrategyRun:
    certified: int
    requests: int
    makespan: float

    @property
    def tps(self) -> float:
        return self.certified / self.makespan if self.makespan > 0 else 0.0


def run_strategy(spec: BenchSpec, eager: bool) -> StrategyRun:
    sc = Scenario(
        n=spec.n,
        f=spec.f,
        seed=spec.seed,
        workload=WorkloadSpec(requests=spec.requests, rate=spec.rate, groups=spec.groups, seed=spec.seed),
        # long timeouts: a saturated queue must not look like a faulty primary
        view_timeout=60.0,
        client_timeout=600.0,
        exec_batch_max=spec.exec_batch_max,
        agree_batch_max=spec.agree_batch_max,
        agree_pipeline=spec.agree_pipeline,
        checkpoint_interval=64,
        link=spec.link,
        cost=spec.cost,
        eager=eager,
        duration=3600.0,
        wire=False,
    )
    result = run_scenario(sc)
    done = [p for p in result.client.finished if p.certified]
    if not done:
        return StrategyRun(0, spec.requests, 0.0)
    start = min(p.started for p in result.client.finished)
    end = max(p.finished for p in done)
    return StrategyRun(len(done), spec.requests, end - start)


def bench_strategies(spec: BenchSpec = BenchSpec()) -> dict:
    """Run both orderings on the same workload and seed; throughput in requests per virtual second."""
    first = run_strategy(spec, eager=True)
    second = run_strategy(spec, eager=False)
    return {
        "execute_agree_attest_tps": first.tps,
        "agree_execute_tps": second.tps,
        "ratio": first.tps / second.tps if second.tps else float("inf"),
        "certified": (first.certified, second.certified),
        "requests": spec.requests,
    }


def bench_exec_batch(spec: BenchSpec = BenchSpec()) -> dict:
    """Execute/agree/attest throughput with execution batches of up to 4 against batches of 1."""
    big = run_strategy(replace(spec, exec_batch_max=4), eager=True)
    one = run_strategy(replace(spec, exec_batch_max=1), eager=True)
    return {
        "batch4_tps": big.tps,
        "batch1_tps": one.tps,
        "ratio": big.tps / one.tps if one.tps else float("inf"),
    }
