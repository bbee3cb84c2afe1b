"""Core values shared across the node, the proxy and the client.

Everything here is an immutable dataclass with a canonical encoding (see
:mod:`bftinfer.codec`), so values can be hashed, signed and shipped between
processes without further ceremony.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

from . import codec
from .crypto import KeyPair, digest, sign_value, verify_value
from .distance import DistanceDescriptor

REQUEST_ID_SEPARATOR = b"\x1f"


class GroupStatus(enum.IntEnum):
    DEFINED = 0
    ACTIVE = 1
    RETIRED = 2


_ALLOWED_TRANSITIONS = {
    (GroupStatus.DEFINED, GroupStatus.ACTIVE),
    (GroupStatus.ACTIVE, GroupStatus.RETIRED),
    (GroupStatus.DEFINED, GroupStatus.RETIRED),
}


@dataclass(frozen=True)
class NodeIdentity:
    public_key: bytes
    endpoint: str
    index: int


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple[NodeIdentity, ...]
    f: int
    view_timeout: float = 1.0
    exec_batch_max: int = 4
    agree_batch_max: int = 25
    agree_pipeline: int = 2
    checkpoint_interval: int = 16
    owners: tuple[bytes, ...] = ()

    def __post_init__(self):
        keys = [n.public_key for n in self.nodes]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ValueError("nodes must be strictly ordered by public key")
        for i, node in enumerate(self.nodes):
            if node.index != i:
                raise ValueError(f"node {node.endpoint!r} has index {node.index}, expected {i}")
        if self.f < 0 or len(self.nodes) < 3 * self.f + 1:
            raise ValueError(f"N={len(self.nodes)} nodes cannot tolerate f={self.f} (need N >= 3f+1)")
        if min(self.exec_batch_max, self.agree_batch_max, self.agree_pipeline) < 1:
            raise ValueError("batch sizes and pipeline depth must be >= 1")
        if self.checkpoint_interval < 1 or self.view_timeout <= 0:
            raise ValueError("checkpoint_interval and view_timeout must be positive")

    @classmethod
    def build(cls, members, f: int, **params) -> "ClusterConfig":
        """Build from ``(public_key, endpoint)`` pairs in any order."""
        ordered = sorted(members, key=lambda m: m[0])
        nodes = tuple(NodeIdentity(pk, ep, i) for i, (pk, ep) in enumerate(ordered))
        return cls(nodes=nodes, f=f, **params)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def quorum(self) -> int:
        """N - f: results needed for agreement, COMMITs needed for ordering."""
        return self.n - self.f

    def keys(self) -> list[bytes]:
        return [n.public_key for n in self.nodes]

    def index_of(self, public_key: bytes) -> int:
        for node in self.nodes:
            if node.public_key == public_key:
                return node.index
        raise KeyError("public key is not a cluster member")


@dataclass(frozen=True)
class Param:
    key: str
    value: str


@dataclass(frozen=True)
class ModelDescriptor:
    model_url: str
    input_dim: int
    output_dim: int
    weights_digest: bytes
    params: tuple[Param, ...] = ()

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("model dimensions must be >= 1")
        if len(self.weights_digest) != 32:
            raise ValueError("weights_digest must be 32 bytes")


@dataclass(frozen=True)
class ModelGroup:
    group_id: str
    version: int
    models: tuple[ModelDescriptor, ...]
    distance: DistanceDescriptor
    status: GroupStatus = GroupStatus.DEFINED

    def __post_init__(self):
        if self.version < 1:
            raise ValueError("group versions start at 1")
        if not self.models:
            raise ValueError("a model group needs at least one model")
        dims = {(m.input_dim, m.output_dim) for m in self.models}
        if len(dims) != 1:
            raise ValueError(f"models in group {self.group_id!r} disagree on dimensions: {sorted(dims)}")

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.models[0].output_dim

    def with_status(self, status: GroupStatus) -> "ModelGroup":
        if status == self.status:
            return self
        if (self.status, status) not in _ALLOWED_TRANSITIONS:
            raise ValueError(f"illegal status transition {self.status.name} -> {status.name}")
        return replace(self, status=status)


def canonical_request_id(client_id: bytes, nonce: bytes) -> bytes:
    if not nonce:
        raise ValueError("nonce must be nonempty")
    return digest(client_id + REQUEST_ID_SEPARATOR + nonce)


@dataclass(frozen=True)
class InferenceRequest:
    request_id: bytes
    group_id: str
    input: tuple[float, ...]
    client_key: bytes
    nonce: bytes
    epsilon_override: Optional[float] = None
    client_sig: bytes = b""

    def unsigned(self) -> "InferenceRequest":
        return replace(self, client_sig=b"")

    def signature_valid(self) -> bool:
        if self.request_id != canonical_request_id(self.client_key, self.nonce):
            return False
        if self.epsilon_override is not None and not self.epsilon_override >= 0:
            return False
        return verify_value(self.client_key, self.unsigned(), self.client_sig)

    @property
    def dedup_key(self) -> bytes:
        # retries with a different epsilon are distinct requests
        eps = codec.encode(self.epsilon_override, Optional[float])
        return digest(self.request_id + eps)


def make_request(key: KeyPair, nonce: bytes, group_id: str, values, epsilon=None) -> InferenceRequest:
    req = InferenceRequest(
        request_id=canonical_request_id(key.public_key, nonce),
        group_id=group_id,
        input=tuple(float(x) for x in values),
        client_key=key.public_key,
        nonce=nonce,
        epsilon_override=None if epsilon is None else float(epsilon),
    )
    return replace(req, client_sig=sign_value(key, req))


@dataclass(frozen=True)
class InferenceResult:
    request_id: bytes
    node_index: int
    group_id: str
    group_version: int
    output: tuple[float, ...]
    model_digest: bytes


def primary_index(view: int, config: ClusterConfig) -> int:
    if view < 0:
        raise ValueError("view must be >= 0")
    return view % config.n


def assigned_models(d: int, group: ModelGroup, node: NodeIdentity) -> list[ModelDescriptor]:
    """Models that owner node ``node.index`` (of ``d`` nodes) loads for ``group``.

    With at least as many models as nodes the ordered model list is cut into
    ``d`` contiguous, disjoint, nonempty chunks. With fewer models, each node
    loads one model and every model is replicated on ``ceil(d / |G|)`` or
    fewer nodes.
    """
    g = len(group.models)
    if g == 0:
        raise ValueError("empty model group")
    if d < 1 or not 0 <= node.index < d:
        raise ValueError(f"node index {node.index} outside owner set of size {d}")
    k = node.index
    if g >= d:
        return list(group.models[k * g // d:(k + 1) * g // d])
    return [group.models[k * g // d]]


# Ops that pass through agreement. Every op carries the key of whoever
# submitted it and a signature over the op with ``sig`` blanked.

@dataclass(frozen=True)
class RequestInf:
    request: InferenceRequest

    @property
    def key(self) -> bytes:
        return self.request.dedup_key

    @property
    def group_id(self) -> str:
        return self.request.group_id

    def signature_valid(self, owners=None) -> bool:
        return self.request.signature_valid()


@dataclass(frozen=True)
class OwnerOp:
    group_id: str
    owner_key: bytes
    nonce: bytes
    sig: bytes

    @property
    def key(self) -> bytes:
        return digest(codec.encode(self))

    def signature_valid(self, owners=None) -> bool:
        if owners and self.owner_key not in owners:
            return False
        return verify_value(self.owner_key, replace(self, sig=b""), self.sig)


@dataclass(frozen=True)
class DefineGroup(OwnerOp):
    models: tuple[ModelDescriptor, ...] = field(default=())
    distance: Optional[DistanceDescriptor] = None


@dataclass(frozen=True)
class ActivateGroup(OwnerOp):
    pass


@dataclass(frozen=True)
class RetireGroup(OwnerOp):
    pass


Op = RequestInf | DefineGroup | ActivateGroup | RetireGroup
UPDATE_OPS = (DefineGroup, ActivateGroup, RetireGroup)


def sign_owner_op(key: KeyPair, op):
    op = replace(op, owner_key=key.public_key, sig=b"")
    return replace(op, sig=sign_value(key, op))
