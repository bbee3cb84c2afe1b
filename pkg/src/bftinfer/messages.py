"""Protocol messages, Merkle leaf formats and the signed-tuple table.

Signed tuples (each signature is over ``H(kind byte || encoding of the
message with its signature field empty)``):

=============  ==============================================
PRE-PREPARE    (view, seq, H(ops), R root of the primary)
PREPARE        (view, seq, j, node, R root of the sender)
COMMIT         (view, seq, j, node, A root of the sender)
CHECKPOINT     (seq, state digest, node)
VIEW-CHANGE    (new view, node, checkpoint, prepared proofs, evidence)
NEW-VIEW       (view, view changes, re-proposed batches)
=============  ==============================================

``j`` is the hash of the full signed PRE-PREPARE, which binds every later
message to one proposal without repeating the ops.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

from . import codec, merkle
from .crypto import KeyPair, digest, verify
from .distance import DistanceDescriptor
from .domain import InferenceRequest, InferenceResult, ModelGroup, Op


class Kind(enum.IntEnum):
    PRE_PREPARE = 1
    PREPARE = 2
    COMMIT = 3
    CHECKPOINT = 4
    VIEW_CHANGE = 5
    NEW_VIEW = 6
    DISCOVERY = 7


def _signing_digest(kind: Kind, msg) -> bytes:
    return digest(bytes([kind]) + codec.encode(replace(msg, sig=b"")))


def sign_msg(key: KeyPair, msg):
    return replace(msg, sig=key.sign(_signing_digest(msg.KIND, msg)))


def msg_sig_valid(msg, pub: bytes) -> bool:
    try:
        d = _signing_digest(msg.KIND, msg)
    except codec.CodecError:
        return False
    return verify(pub, d, msg.sig)


@dataclass(frozen=True)
class PrePrepare:
    KIND = Kind.PRE_PREPARE
    view: int
    seq: int
    ops_hash: bytes
    r_root: bytes
    r_count: int  # leaves under r_root, so leaf positions are bound by the signature
    sig: bytes = b""


@dataclass(frozen=True)
class Prepare:
    KIND = Kind.PREPARE
    view: int
    seq: int
    pp_hash: bytes
    node: int
    r_root: bytes
    r_count: int
    sig: bytes = b""


@dataclass(frozen=True)
class Commit:
    KIND = Kind.COMMIT
    view: int
    seq: int
    pp_hash: bytes
    node: int
    a_root: bytes
    a_count: int
    sig: bytes = b""


def pre_prepare_hash(pp: PrePrepare) -> bytes:
    return digest(codec.encode(pp))


def ops_hash(ops) -> bytes:
    return digest(codec.encode(tuple(ops), tuple[Op, ...]))


# -- Merkle leaves ----------------------------------------------------------

# Root used when a node has nothing to put in a tree (no results / nothing to attest).
EMPTY_ROOT = digest(b"bftinfer/empty-tree")


def request_digest(req: InferenceRequest) -> bytes:
    return digest(codec.encode(req))


@dataclass(frozen=True)
class ResultLeaf:
    request_digest: bytes
    result: InferenceResult


def result_leaf(req: InferenceRequest, result: InferenceResult) -> bytes:
    return codec.encode(ResultLeaf(request_digest(req), result))


class Outcome(enum.IntEnum):
    OK = 0
    NO_QUORUM = 1
    REJECTED = 2
    DUPLICATE = 3


@dataclass(frozen=True)
class ResultAttestation:
    node: int
    leaf_digest: bytes


@dataclass(frozen=True)
class BatchAttestation:
    node: int
    r_root: bytes


@dataclass(frozen=True)
class StatusAttestation:
    request_digest: bytes
    outcome: Outcome


AttestLeaf = ResultAttestation | BatchAttestation | StatusAttestation


def attest_leaf_bytes(leaf) -> bytes:
    return codec.encode(leaf, AttestLeaf)


def tree_root(leaves: list[bytes]) -> bytes:
    return merkle.build(leaves).root if leaves else EMPTY_ROOT


# -- bundles sent between coordinators --------------------------------------

@dataclass(frozen=True)
class PrePrepareBundle:
    pre_prepare: PrePrepare
    ops: tuple[Op, ...]
    results: tuple[InferenceResult, ...]


@dataclass(frozen=True)
class PrepareBundle:
    prepare: Prepare
    results: tuple[InferenceResult, ...]


@dataclass(frozen=True)
class CommitBundle:
    commit: Commit
    attestations: tuple[AttestLeaf, ...]


@dataclass(frozen=True)
class FetchBatch:
    """Ask a peer for the PRE-PREPARE it holds at (view, seq)."""
    view: int
    seq: int


@dataclass(frozen=True)
class FetchResult:
    """Ask a peer to forward ``node``'s result bundle for (view, seq)."""
    view: int
    seq: int
    pp_hash: bytes
    node: int


@dataclass(frozen=True)
class Checkpoint:
    KIND = Kind.CHECKPOINT
    seq: int
    state_digest: bytes
    node: int
    sig: bytes = b""


@dataclass(frozen=True)
class PreparedProof:
    pre_prepare: PrePrepare
    ops: tuple[Op, ...]
    prepares: tuple[Prepare, ...]


@dataclass(frozen=True)
class ViewChange:
    KIND = Kind.VIEW_CHANGE
    new_view: int
    node: int
    checkpoint_seq: int
    checkpoint_digest: bytes
    checkpoint_proof: tuple[Checkpoint, ...]
    prepared: tuple[PreparedProof, ...]
    evidence: tuple[PrePrepare, ...] = ()
    sig: bytes = b""


@dataclass(frozen=True)
class Reproposal:
    seq: int
    ops: tuple[Op, ...]


@dataclass(frozen=True)
class NewView:
    KIND = Kind.NEW_VIEW
    view: int
    view_changes: tuple[ViewChange, ...]
    batches: tuple[Reproposal, ...]
    sig: bytes = b""


@dataclass(frozen=True)
class FetchOrdered:
    seq: int


@dataclass(frozen=True)
class OrderedProof:
    pre_prepare: PrePrepare
    ops: tuple[Op, ...]
    commits: tuple[Commit, ...]


@dataclass(frozen=True)
class Forward:
    """Proxy fan-out of a client or owner op to every coordinator."""
    op: Op


# -- client <-> proxy ------------------------------------------------------

@dataclass(frozen=True)
class ResultSig:
    node: int
    r_root: bytes
    r_count: int
    sig: bytes


@dataclass(frozen=True)
class CommitSig:
    node: int
    a_root: bytes
    a_count: int
    sig: bytes


class AttestKind(enum.IntEnum):
    RESULT = 0
    BATCH = 1
    STATUS = 2


@dataclass(frozen=True)
class Attestation:
    subject: int
    attester: int
    kind: AttestKind
    path: merkle.AuthPath


@dataclass(frozen=True)
class ResultPath:
    node: int
    path: merkle.AuthPath


@dataclass(frozen=True)
class InferenceCertificate:
    view: int
    seq: int
    ops_hash: bytes
    outcome: Outcome
    result_sigs: tuple[ResultSig, ...]
    commit_sigs: tuple[CommitSig, ...]
    result_paths: tuple[ResultPath, ...]
    attestations: tuple[Attestation, ...]


@dataclass(frozen=True)
class InferResponse:
    request_id: bytes
    outcome: Outcome
    results: tuple[InferenceResult, ...]
    certificate: Optional[InferenceCertificate]
    distance: Optional[DistanceDescriptor]
    group_version: int = 0


@dataclass(frozen=True)
class SubmitInf:
    request: InferenceRequest


@dataclass(frozen=True)
class SubmitOwnerOp:
    op: Op


@dataclass(frozen=True)
class OpAck:
    op_key: bytes
    outcome: Outcome
    view: int
    seq: int
    detail: str = ""


@dataclass(frozen=True)
class UploadModel:
    model_url: str
    params: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class RetireModel:
    model_url: str


@dataclass(frozen=True)
class UploadAck:
    model_url: str
    ok: bool
    weights_digest: bytes = b""
    detail: str = ""


@dataclass(frozen=True)
class GetModelGroups:
    pass


@dataclass(frozen=True)
class ModelGroups:
    groups: tuple[ModelGroup, ...]


@dataclass(frozen=True)
class GetEndpoints:
    pass


@dataclass(frozen=True)
class Endpoint:
    api_url: str
    public_key: bytes


@dataclass(frozen=True)
class Discovery:
    KIND = Kind.DISCOVERY
    endpoints: tuple[Endpoint, ...]
    f: int
    discovery_key: bytes
    sig: bytes = b""


@dataclass(frozen=True)
class ErrorReply:
    detail: str


# Everything that can appear in a transport frame.
Payload = (
    PrePrepareBundle | PrepareBundle | CommitBundle | FetchBatch | FetchResult
    | Checkpoint | ViewChange | NewView | FetchOrdered | OrderedProof | Forward
    | SubmitInf | SubmitOwnerOp | InferResponse | OpAck | UploadModel | RetireModel
    | UploadAck | GetModelGroups | ModelGroups | GetEndpoints | Discovery | ErrorReply
)


def encode_payload(payload) -> bytes:
    return codec.encode(payload, Payload)


def decode_payload(data: bytes):
    return codec.decode(data, Payload)
