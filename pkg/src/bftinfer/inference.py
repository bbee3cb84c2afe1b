"""Per-node inference engine.

Requests are executed before they are ordered: every submitted request is
queued against each live (defined or active) version of its group, queues
are keyed by model so one execution batch always targets one model, and the
results wait in a :class:`PendingResultStore` until agreement picks the
version that was active at the request's ordering point.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence
from urllib.parse import urlparse

from . import codec
from .crypto import digest
from .domain import (
    ClusterConfig,
    GroupStatus,
    InferenceRequest,
    InferenceResult,
    ModelDescriptor,
    ModelGroup,
    assigned_models,
)

log = logging.getLogger(__name__)


class LoadError(Exception):
    pass


class SubmitError(Exception):
    pass


@dataclass(frozen=True)
class LinearToyModel:
    """``output = softmax?(W x + b)`` with ``W`` stored row-major."""

    input_dim: int
    output_dim: int
    weights: tuple[float, ...]
    bias: tuple[float, ...]
    softmax: bool = False

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("model dimensions must be >= 1")
        if len(self.weights) != self.input_dim * self.output_dim:
            raise ValueError("weights do not match dimensions")
        if len(self.bias) != self.output_dim:
            raise ValueError("bias does not match output dimension")

    def to_bytes(self) -> bytes:
        return codec.encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinearToyModel":
        return codec.decode(data, cls)

    @property
    def digest(self) -> bytes:
        return digest(self.to_bytes())

    def describe(self, url: str, params=()) -> ModelDescriptor:
        return ModelDescriptor(url, self.input_dim, self.output_dim, self.digest, tuple(params))

    def apply(self, x: Sequence[float]) -> tuple[float, ...]:
        u = self.input_dim
        # fsum is correctly rounded, so a row's value never depends on batching
        out = [
            math.fsum(itertools.chain((w * xi for w, xi in zip(self.weights[r * u:(r + 1) * u], x)), (self.bias[r],)))
            for r in range(self.output_dim)
        ]
        if self.softmax:
            top = max(out)
            exps = [math.exp(v - top) for v in out]
            total = math.fsum(exps)
            out = [e / total for e in exps]
        return tuple(out)

    @classmethod
    def identity(cls, dim: int, softmax: bool = False) -> "LinearToyModel":
        w = tuple(1.0 if r == c else 0.0 for r in range(dim) for c in range(dim))
        return cls(dim, dim, w, (0.0,) * dim, softmax)

    @classmethod
    def random(cls, rng: random.Random, input_dim: int, output_dim: int, scale=1.0, softmax=False):
        w = tuple(rng.gauss(0.0, scale) for _ in range(input_dim * output_dim))
        b = tuple(rng.gauss(0.0, scale) for _ in range(output_dim))
        return cls(input_dim, output_dim, w, b, softmax)


class ModelExecutor(Protocol):
    def run(self, model: LinearToyModel, inputs: Sequence[Sequence[float]]) -> list[tuple[float, ...]]:
        ...


class ToyExecutor:
    def run(self, model, inputs):
        return [model.apply(x) for x in inputs]


class PerturbedExecutor:
    """Adds a deterministic per-node offset in ``[-magnitude, magnitude]`` to every output.

    Models hardware nondeterminism across nodes: the same node always returns
    the same bits for the same model and input, different nodes do not.
    """

    def __init__(self, base: ModelExecutor, node_index: int, magnitude: float, seed: int = 0):
        self.base = base
        self.node_index = node_index
        self.magnitude = magnitude
        self.seed = seed

    def run(self, model, inputs):
        outs = self.base.run(model, inputs)
        if not self.magnitude:
            return outs
        perturbed = []
        for x, y in zip(inputs, outs):
            key = codec.encode((self.seed, self.node_index, tuple(float(v) for v in x)), tuple[int, int, tuple[float, ...]])
            rng = random.Random(digest(key))
            perturbed.append(tuple(v + rng.uniform(-self.magnitude, self.magnitude) for v in y))
        return perturbed


class ModelStore:
    """Where model files live: an in-memory catalogue plus ``file://`` URLs and plain paths."""

    def __init__(self, files: Optional[dict[str, bytes]] = None):
        self.files = files if files is not None else {}

    def put(self, url: str, data: bytes) -> None:
        self.files[url] = data

    def fetch(self, url: str) -> bytes:
        if url in self.files:
            return self.files[url]
        parsed = urlparse(url)
        path = parsed.path if parsed.scheme == "file" else url
        if parsed.scheme in ("", "file") and os.path.isfile(path):
            return Path(path).read_bytes()
        raise LoadError(f"model file not found: {url}")


@dataclass
class ExecutionBatch:
    group_id: str
    group_version: int
    model_digest: bytes
    requests: list[InferenceRequest]


@dataclass
class _Resident:
    group: ModelGroup
    models: list[tuple[ModelDescriptor, LinearToyModel]]

    def pick(self, request_id: bytes) -> tuple[ModelDescriptor, LinearToyModel]:
        # spread requests over this node's share of the group, deterministically
        return self.models[int.from_bytes(request_id[:4], "big") % len(self.models)]


class PendingResultStore:
    """request_id -> {group_version -> result}; ``None`` marks a failed execution."""

    def __init__(self):
        self._results: dict[bytes, dict[int, Optional[InferenceResult]]] = {}

    def put(self, request_id: bytes, version: int, result: Optional[InferenceResult]) -> None:
        self._results.setdefault(request_id, {})[version] = result

    def get(self, request_id: bytes, version: int) -> Optional[InferenceResult]:
        return self._results.get(request_id, {}).get(version)

    def has(self, request_id: bytes, version: int) -> bool:
        return version in self._results.get(request_id, {})

    def versions(self, request_id: bytes) -> list[int]:
        return sorted(self._results.get(request_id, {}))

    def prune(self, request_id: bytes) -> None:
        self._results.pop(request_id, None)

    def __len__(self) -> int:
        return len(self._results)


class InferenceEngine:
    """One node's execution side. Time and scheduling belong to the caller."""

    def __init__(
        self,
        config: ClusterConfig,
        node_index: int,
        store: ModelStore,
        executor: Optional[ModelExecutor] = None,
        eager: bool = True,
    ):
        self.config = config
        self.node = config.nodes[node_index]
        self.store = store
        self.executor = executor or ToyExecutor()
        # eager=False is the agree/execute variant: nothing runs until ordering asks
        self.eager = eager
        self.groups: dict[str, dict[int, ModelGroup]] = {}
        self.resident: dict[tuple[str, int], _Resident] = {}
        self.results = PendingResultStore()
        self._queues: dict[tuple[str, int, bytes], list[tuple[int, InferenceRequest]]] = {}
        self._queued: set[tuple[bytes, int]] = set()
        self._submitted: dict[bytes, InferenceRequest] = {}
        self._ticket = itertools.count()
        self.on_work: Callable[[], None] = lambda: None

    # -- model groups -----------------------------------------------------

    def load_group(self, group: ModelGroup) -> None:
        """Register ``group`` and load this node's share of its models."""
        existing = self.groups.get(group.group_id, {})
        if group.version in existing:
            raise LoadError(f"{group.group_id} v{group.version} already loaded")
        loaded = []
        for desc in assigned_models(self.config.n, group, self.node):
            data = self.store.fetch(desc.model_url)
            if digest(data) != desc.weights_digest:
                raise LoadError(f"digest mismatch for {desc.model_url}")
            try:
                model = LinearToyModel.from_bytes(data)
            except codec.CodecError as exc:
                raise LoadError(f"unreadable model file {desc.model_url}: {exc}") from None
            if (model.input_dim, model.output_dim) != (desc.input_dim, desc.output_dim):
                raise LoadError(f"{desc.model_url} dimensions differ from its descriptor")
            loaded.append((desc, model))
        self.groups.setdefault(group.group_id, {})[group.version] = group
        self.resident[(group.group_id, group.version)] = _Resident(group, loaded)
        if self.eager:
            # requests already waiting run against the new version too
            for req in list(self._submitted.values()):
                if req.group_id == group.group_id:
                    self._enqueue(req, group.version)

    def set_status(self, group_id: str, version: int, status: GroupStatus) -> None:
        group = self.groups[group_id][version]
        self.groups[group_id][version] = group.with_status(status)
        if status == GroupStatus.RETIRED:
            self.resident.pop((group_id, version), None)
            for key in [k for k in self._queues if k[:2] == (group_id, version)]:
                for _, req in self._queues.pop(key):
                    self._queued.discard((req.request_id, version))

    def live_versions(self, group_id: str) -> list[int]:
        return sorted(
            v for v, g in self.groups.get(group_id, {}).items()
            if g.status != GroupStatus.RETIRED and (group_id, v) in self.resident
        )

    # -- requests ---------------------------------------------------------

    def submit(self, req: InferenceRequest, check_signature: bool = True) -> int:
        """Queue ``req`` on every live version; returns how many versions it joined."""
        if req.group_id not in self.groups:
            raise SubmitError(f"unknown model group {req.group_id!r}")
        live = self.live_versions(req.group_id)
        if not live:
            raise SubmitError(f"model group {req.group_id!r} has no live version")
        if check_signature and not req.signature_valid():
            raise SubmitError("invalid client signature")
        dims = self.groups[req.group_id][live[-1]].input_dim
        if len(req.input) != dims:
            raise SubmitError(f"input has {len(req.input)} values, group expects {dims}")
        self._submitted[req.request_id] = req
        if not self.eager:
            return 0
        for v in live:
            self._enqueue(req, v)
        return len(live)

    def ensure(self, req: InferenceRequest, version: int) -> bool:
        """Make sure a result for ``version`` exists or is on its way. False if impossible."""
        if self.results.has(req.request_id, version) or (req.request_id, version) in self._queued:
            return True
        if (req.group_id, version) not in self.resident:
            return False
        self._submitted.setdefault(req.request_id, req)
        self._enqueue(req, version)
        return True

    def _enqueue(self, req: InferenceRequest, version: int) -> None:
        key = (req.request_id, version)
        if key in self._queued or self.results.has(*key):
            return
        resident = self.resident.get((req.group_id, version))
        if resident is None or not resident.models:
            self.results.put(req.request_id, version, None)
            return
        desc, _ = resident.pick(req.request_id)
        self._queues.setdefault((req.group_id, version, desc.weights_digest), []).append(
            (next(self._ticket), req)
        )
        self._queued.add(key)
        self.on_work()

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def has_full_batch(self) -> bool:
        return any(len(q) >= self.config.exec_batch_max for q in self._queues.values())

    def next_batch(self, force: bool = False) -> Optional[ExecutionBatch]:
        """Oldest full queue first; with ``force``, the oldest nonempty queue."""
        limit = self.config.exec_batch_max
        candidates = [(q[0][0], k) for k, q in self._queues.items() if q and (force or len(q) >= limit)]
        if not candidates:
            return None
        _, key = min(candidates)
        queue = self._queues[key]
        taken, self._queues[key] = queue[:limit], queue[limit:]
        if not self._queues[key]:
            del self._queues[key]
        return ExecutionBatch(key[0], key[1], key[2], [req for _, req in taken])

    def execute_batch(self, batch: ExecutionBatch) -> list[Optional[InferenceResult]]:
        for req in batch.requests:
            self._queued.discard((req.request_id, batch.group_version))
        resident = self.resident.get((batch.group_id, batch.group_version))
        model = None
        if resident is not None:
            model = next((m for d, m in resident.models if d.weights_digest == batch.model_digest), None)
        outs: list[Optional[InferenceResult]]
        if model is None:
            outs = [None] * len(batch.requests)
        else:
            try:
                raw = self.executor.run(model, [r.input for r in batch.requests])
                outs = [
                    InferenceResult(
                        request_id=r.request_id,
                        node_index=self.node.index,
                        group_id=batch.group_id,
                        group_version=batch.group_version,
                        output=tuple(float(v) for v in y),
                        model_digest=batch.model_digest,
                    )
                    for r, y in zip(batch.requests, raw)
                ]
            except Exception:
                log.exception("executor failed on %s v%d", batch.group_id, batch.group_version)
                outs = [None] * len(batch.requests)
        for req, res in zip(batch.requests, outs):
            self.results.put(req.request_id, batch.group_version, res)
        return outs

    def result(self, request_id: bytes, version: int) -> Optional[InferenceResult]:
        return self.results.get(request_id, version)

    def has_result(self, request_id: bytes, version: int) -> bool:
        return self.results.has(request_id, version)

    def ordered(self, request_id: bytes) -> None:
        """The request was ordered; its results are no longer needed."""
        self._submitted.pop(request_id, None)
        self.results.prune(request_id)
        for key in list(self._queues):
            q = [(t, r) for t, r in self._queues[key] if r.request_id != request_id]
            if len(q) != len(self._queues[key]):
                for _, r in self._queues[key]:
                    if r.request_id == request_id:
                        self._queued.discard((request_id, key[1]))
                if q:
                    self._queues[key] = q
                else:
                    del self._queues[key]
