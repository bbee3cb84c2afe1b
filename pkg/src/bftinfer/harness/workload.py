"""Reproducible workloads: toy model groups, request streams and group updates."""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..distance import DistanceDescriptor, Metric
from ..domain import GroupStatus, ModelGroup
from ..inference import LinearToyModel, ModelStore


@dataclass(frozen=True)
class WorkloadSpec:
    requests: int = 100
    rate: float = 200.0  # requests per second of virtual time
    update_fraction: float = 0.0  # share of ops that are define/activate
    groups: int = 1
    seed: int = 0
    input_dim: int = 4
    output_dim: int = 3
    model_spread: float = 0.002  # weight noise between models of one version
    metric: Metric = Metric.CHEBYSHEV
    epsilon: float = 0.2


@dataclass(frozen=True)
class Arrival:
    time: float
    kind: str  # "request" or "update"
    group: str
    values: tuple[float, ...] = ()


def group_name(k: int) -> str:
    return f"g{k}"


def make_version(spec: WorkloadSpec, store: ModelStore, group_id: str, version: int, models: int) -> ModelGroup:
    """Create ``models`` close variants of one random linear classifier and stage them in ``store``."""
    rng = random.Random(f"{spec.seed}/{group_id}/{version}")
    base = LinearToyModel.random(rng, spec.input_dim, spec.output_dim, scale=1.0, softmax=True)
    descs = []
    for m in range(models):
        w = tuple(x + rng.uniform(-spec.model_spread, spec.model_spread) for x in base.weights)
        model = LinearToyModel(spec.input_dim, spec.output_dim, w, base.bias, True)
        url = f"mem://{group_id}/v{version}/m{m}"
        store.put(url, model.to_bytes())
        descs.append(model.describe(url))
    return ModelGroup(group_id, version, tuple(descs), DistanceDescriptor(spec.metric, spec.epsilon))


def genesis_groups(spec: WorkloadSpec, store: ModelStore, models: int) -> list[ModelGroup]:
    return [
        make_version(spec, store, group_name(k), 1, models).with_status(GroupStatus.ACTIVE)
        for k in range(spec.groups)
    ]


def arrivals(spec: WorkloadSpec) -> list[Arrival]:
    """Poisson request arrivals with updates mixed in at the requested share."""
    rng = random.Random(spec.seed)
    out = []
    t = 0.0
    uf = spec.update_fraction
    # each update is a define followed by an activate: two ops
    updates = round(spec.requests * uf / (1 - uf) / 2) if uf > 0 else 0
    total = spec.requests + updates
    kinds = ["request"] * spec.requests + ["update"] * updates
    rng.shuffle(kinds)
    for i in range(total):
        t += rng.expovariate(spec.rate) if spec.rate > 0 else 0.0
        g = group_name(rng.randrange(spec.groups))
        if kinds[i] == "request":
            values = tuple(round(rng.uniform(-1, 1), 6) for _ in range(spec.input_dim))
            out.append(Arrival(t, "request", g, values))
        else:
            out.append(Arrival(t, "update", g))
    return out
