"""Agreement coordinator: three-phase ordering of ops plus result attestation.

One coordinator runs per node on a single logical event loop. The primary of
view ``v`` (``v mod N``) proposes batches of ops; every node folds each
accepted batch through the model-group version state, picks its own results
for the versions active at that point, exchanges them in PREPAREs, runs
quorum selection once ``N - f`` result sets are in, and attests the selected
results in its COMMIT. A batch is ordered once ``N - f`` COMMITs (own
included) are held.

A batch whose ops change version state is a barrier: no later batch is
accepted until it is ordered, so the fold of every accepted batch starts from
the ordered state. View changes follow PBFT with stable checkpoints as the
low watermark and state transfer by ordered-batch proofs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import merkle
from .crypto import KeyPair, digest
from .distance import InsufficientResults, Metric, select_quorum
from .domain import (
    UPDATE_OPS,
    ActivateGroup,
    ClusterConfig,
    DefineGroup,
    GroupStatus,
    InferenceRequest,
    InferenceResult,
    ModelGroup,
    Op,
    RequestInf,
    RetireGroup,
    primary_index,
)
from .messages import (
    BatchAttestation,
    Checkpoint,
    Commit,
    CommitBundle,
    FetchBatch,
    FetchOrdered,
    FetchResult,
    NewView,
    OrderedProof,
    Outcome,
    PreparedProof,
    Prepare,
    PrepareBundle,
    PrePrepare,
    PrePrepareBundle,
    Reproposal,
    ResultAttestation,
    StatusAttestation,
    ViewChange,
    attest_leaf_bytes,
    msg_sig_valid,
    ops_hash,
    pre_prepare_hash,
    request_digest,
    result_leaf,
    sign_msg,
    tree_root,
)

log = logging.getLogger(__name__)

GENESIS_DIGEST = digest(b"bftinfer/genesis")


# -- version state ----------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    """Outcome of folding one op at its position in the order."""

    op: Op
    outcome: Outcome
    group: Optional[ModelGroup] = None  # version used (requests) or affected (updates)
    epsilon: float = 0.0
    detail: str = ""

    @property
    def request(self) -> Optional[InferenceRequest]:
        return self.op.request if isinstance(self.op, RequestInf) else None

    @property
    def version(self) -> int:
        return self.group.version if self.group else 0

    @property
    def changes_state(self) -> bool:
        return self.outcome == Outcome.OK and isinstance(self.op, UPDATE_OPS)

    @property
    def runs(self) -> bool:
        """An accepted inference request: needs results and a quorum decision."""
        return self.outcome == Outcome.OK and isinstance(self.op, RequestInf)


class GroupRegistry:
    """Deterministic fold of ordered update ops: every version of every group."""

    def __init__(self, versions=None, owners=()):
        self.versions: dict[str, list[ModelGroup]] = versions or {}
        self.owners = tuple(owners)

    def copy(self) -> "GroupRegistry":
        return GroupRegistry({k: list(v) for k, v in self.versions.items()}, self.owners)

    def active(self, group_id: str) -> Optional[ModelGroup]:
        for g in reversed(self.versions.get(group_id, ())):
            if g.status == GroupStatus.ACTIVE:
                return g
        return None

    def all_groups(self) -> list[ModelGroup]:
        return [g for gid in sorted(self.versions) for g in self.versions[gid]]

    def apply(self, op, seen: Callable[[bytes], bool], batch_rids: set) -> Entry:
        if seen(op.key):
            return Entry(op, Outcome.DUPLICATE)
        if isinstance(op, RequestInf):
            return self._request(op, batch_rids)
        if not op.signature_valid(self.owners):
            return Entry(op, Outcome.REJECTED, detail="bad owner signature")
        if isinstance(op, DefineGroup):
            return self._define(op)
        if isinstance(op, ActivateGroup):
            return self._activate(op)
        if isinstance(op, RetireGroup):
            return self._retire(op)
        return Entry(op, Outcome.REJECTED, detail="unknown op")

    def _request(self, op: RequestInf, batch_rids: set) -> Entry:
        req = op.request
        if req.request_id in batch_rids:
            return Entry(op, Outcome.REJECTED, detail="request appears twice in one batch")
        batch_rids.add(req.request_id)
        group = self.active(req.group_id)
        if group is None:
            return Entry(op, Outcome.REJECTED, detail="no active version")
        if len(req.input) != group.input_dim:
            return Entry(op, Outcome.REJECTED, group, detail="input dimension mismatch")
        if not req.signature_valid():
            return Entry(op, Outcome.REJECTED, group, detail="bad client signature")
        eps = group.distance.default_epsilon if req.epsilon_override is None else req.epsilon_override
        return Entry(op, Outcome.OK, group, eps)

    def _define(self, op: DefineGroup) -> Entry:
        history = self.versions.get(op.group_id, [])
        if any(g.status == GroupStatus.DEFINED for g in history):
            return Entry(op, Outcome.REJECTED, detail="another update of this group is in flight")
        if op.distance is None:
            return Entry(op, Outcome.REJECTED, detail="no distance descriptor")
        try:
            group = ModelGroup(op.group_id, len(history) + 1, op.models, op.distance)
        except ValueError as exc:
            return Entry(op, Outcome.REJECTED, detail=str(exc))
        self.versions[op.group_id] = history + [group]
        return Entry(op, Outcome.OK, group)

    def _activate(self, op: ActivateGroup) -> Entry:
        history = self.versions.get(op.group_id, [])
        if not history or history[-1].status != GroupStatus.DEFINED:
            return Entry(op, Outcome.REJECTED, detail="no defined version to activate")
        updated = [g.with_status(GroupStatus.RETIRED) if g.status == GroupStatus.ACTIVE else g for g in history]
        updated[-1] = updated[-1].with_status(GroupStatus.ACTIVE)
        self.versions[op.group_id] = updated
        return Entry(op, Outcome.OK, updated[-1])

    def _retire(self, op: RetireGroup) -> Entry:
        history = self.versions.get(op.group_id, [])
        if not any(g.status != GroupStatus.RETIRED for g in history):
            return Entry(op, Outcome.REJECTED, detail="nothing to retire")
        self.versions[op.group_id] = [g.with_status(GroupStatus.RETIRED) for g in history]
        return Entry(op, Outcome.OK, self.versions[op.group_id][-1])

    def digest(self) -> bytes:
        from . import codec
        return digest(codec.encode(tuple(self.all_groups()), tuple[ModelGroup, ...]))


def fold(registry: GroupRegistry, ops, seen: Callable[[bytes], bool]) -> list[Entry]:
    """Apply ``ops`` in order to ``registry`` (mutated) and return one entry per op."""
    entries = []
    batch_keys: set = set()
    batch_rids: set = set()
    for op in ops:
        key = op.key
        entry = registry.apply(op, lambda k: seen(k) or k in batch_keys, batch_rids)
        batch_keys.add(key)
        entries.append(entry)
    return entries


# -- behaviour hooks --------------------------------------------------------

class Behavior:
    """Honest behaviour. Fault injection overrides individual hooks."""

    name = "honest"

    def filter_proposal(self, coord, ops):
        return ops

    def own_results(self, coord, slot, results):
        return results

    def attest_everything(self, coord) -> bool:
        return False

    def pre_prepares(self, coord, bundle, peers):
        """(dest, bundle) pairs to send for a proposal."""
        return [(p, bundle) for p in peers]

    def outgoing(self, coord, dest, payload):
        return payload

    def forwards_client_requests(self) -> bool:
        return True


# -- per-slot bookkeeping ---------------------------------------------------

@dataclass
class Source:
    """One node's validated result set for a batch."""

    node: int
    r_root: bytes
    bundle: object  # PrePrepareBundle or PrepareBundle as received
    leaves: list
    tree: Optional[merkle.MerkleTree]
    results: dict  # request_id -> (InferenceResult, leaf index)
    all_valid: bool

    @property
    def leaf_digests(self) -> set:
        return {digest(x) for x in self.leaves}


@dataclass
class CommitRecord:
    commit: Commit
    leaves: list  # attestation leaf objects
    tree: Optional[merkle.MerkleTree]


@dataclass
class Slot:
    view: int
    seq: int
    pp: Optional[PrePrepare] = None
    pp_hash: bytes = b""
    ops: tuple = ()
    pp_bundle: Optional[PrePrepareBundle] = None
    entries: Optional[list] = None
    registry_after: Optional[GroupRegistry] = None
    sources: dict = field(default_factory=dict)
    prepares: dict = field(default_factory=dict)  # node -> Prepare matching pp_hash
    heard: set = field(default_factory=set)
    raw_prepares: dict = field(default_factory=dict)
    raw_commits: dict = field(default_factory=dict)
    commits: dict = field(default_factory=dict)  # node -> CommitRecord
    pending_commits: dict = field(default_factory=dict)
    own_results: Optional[dict] = None  # request_id -> result or None
    waiting_own: bool = False
    sent_own: bool = False
    sent_commit: bool = False
    decisions: dict = field(default_factory=dict)  # request_id -> (Outcome, selected nodes)
    deadline_passed: bool = False
    deadline_armed: bool = False
    ordered: bool = False
    fetch_sent: set = field(default_factory=set)

    @property
    def accepted(self) -> bool:
        return self.entries is not None

    @property
    def changes_state(self) -> bool:
        return bool(self.entries) and any(e.changes_state for e in self.entries)

    def entry_for(self, request_id: bytes) -> Optional[Entry]:
        for e in self.entries or ():
            if e.runs and e.request.request_id == request_id:
                return e
        return None


@dataclass
class OrderedBatch:
    view: int
    seq: int
    pp: PrePrepare
    ops: tuple
    entries: list
    commits: tuple  # Commit messages proving the order
    slot: Optional[Slot]
    own_results: dict


class Coordinator:
    def __init__(
        self,
        config: ClusterConfig,
        index: int,
        key: KeyPair,
        engine,
        net,
        behavior: Optional[Behavior] = None,
        attest_wait: Optional[float] = None,
    ):
        self.config = config
        self.n = config.n
        self.f = config.f
        self.index = index
        self.key = key
        self.engine = engine
        self.net = net
        self.behavior = behavior or Behavior()
        self.attest_wait = attest_wait if attest_wait is not None else config.view_timeout / 4
        self.keys = config.keys()

        self.view = 0
        self.in_view_change = False
        self.vc_target = 0
        self.vc_timer = None
        self.view_changes: dict[int, dict[int, ViewChange]] = {}
        self.new_view_sent: set[int] = set()
        self.nv_batches: dict[int, tuple] = {}
        self.nv_low = 0

        self.registry = GroupRegistry(owners=config.owners)
        self.last_ordered = 0
        self.log: dict[int, OrderedBatch] = {}
        self.ordered_keys: dict[bytes, tuple[int, int]] = {}
        self.state_digest = GENESIS_DIGEST
        self.checkpoints: dict[int, dict[int, Checkpoint]] = {}
        self.stable_seq = 0
        self.stable_digest = GENESIS_DIGEST
        self.stable_proof: tuple = ()
        self.prepared_proofs: dict[int, PreparedProof] = {}
        self.evidence: dict[tuple[int, int], tuple] = {}

        self.slots: dict[int, Slot] = {}
        self.next_seq = 1
        self.pending: dict[bytes, Op] = {}
        self.op_timers: dict[bytes, object] = {}
        self.catch_up_target = 0
        self.catch_up_inflight = False

        self.on_ordered: Callable[[OrderedBatch], None] = lambda batch: None
        self.on_slot_update: Callable[[Slot], None] = lambda slot: None

    def bootstrap(self, groups) -> None:
        """Start from a genesis set of groups instead of an empty registry."""
        for g in groups:
            self.registry.versions.setdefault(g.group_id, []).append(g)
        self._sync_engine()

    # -- helpers ----------------------------------------------------------

    @property
    def primary(self) -> int:
        return primary_index(self.view, self.config)

    @property
    def is_primary(self) -> bool:
        return self.primary == self.index

    def _send(self, dest: int, payload) -> None:
        payload = self.behavior.outgoing(self, dest, payload)
        if payload is not None:
            self.net.send(dest, payload)

    def _broadcast(self, payload) -> None:
        for dest in range(self.n):
            if dest != self.index:
                self._send(dest, payload)

    def _trace(self, kind: str, **fields) -> None:
        self.net.trace(kind, **fields)

    def _key_of(self, node: int) -> Optional[bytes]:
        if isinstance(node, int) and 0 <= node < self.n:
            return self.keys[node]
        return None

    def _valid(self, msg, node: int) -> bool:
        pub = self._key_of(node)
        return pub is not None and msg_sig_valid(msg, pub)

    def _window_ok(self, seq: int) -> bool:
        hi = max(self.last_ordered, self.nv_low) + 2 * self.config.checkpoint_interval + 4 * self.config.agree_pipeline
        return 0 < seq <= hi

    def _slot(self, seq: int, create: bool = True) -> Optional[Slot]:
        slot = self.slots.get(seq)
        if slot is None and create and self._window_ok(seq):
            slot = self.slots[seq] = Slot(self.view, seq)
        return slot

    def _seen(self, key: bytes) -> bool:
        return key in self.ordered_keys

    def ordered_location(self, key: bytes) -> Optional[tuple[int, int]]:
        return self.ordered_keys.get(key)

    # -- ops entering the system ------------------------------------------

    def add_op(self, op, arm_timer: bool = True) -> None:
        key = op.key
        if key in self.ordered_keys:
            return
        if key not in self.pending:
            self.pending[key] = op
        if arm_timer and key not in self.op_timers and not self.in_view_change:
            self._arm_op_timer(key)
        self.try_propose()

    def _arm_op_timer(self, key: bytes) -> None:
        view = self.view
        self.op_timers[key] = self.net.schedule(
            self.config.view_timeout, lambda: self._op_timeout(key, view)
        )

    def _op_timeout(self, key: bytes, view: int) -> None:
        self.op_timers.pop(key, None)
        if key in self.ordered_keys or key not in self.pending:
            return
        if self.view != view or self.in_view_change:
            return
        self._trace("timeout", view=view)
        self.start_view_change(self.view + 1)

    def _in_flight_keys(self) -> set:
        keys = set()
        for slot in self.slots.values():
            if not slot.ordered:
                keys.update(op.key for op in slot.ops)
        return keys

    # -- proposing (primary) ----------------------------------------------

    def _outstanding(self) -> list[Slot]:
        return [s for s in self.slots.values() if s.seq > self.last_ordered and not s.ordered]

    def try_propose(self) -> None:
        if not self.is_primary or self.in_view_change or self.last_ordered < self.nv_low:
            return
        while True:
            outstanding = self._outstanding()
            if len(outstanding) >= self.config.agree_pipeline:
                return
            if any(s.changes_state or not s.accepted for s in outstanding):
                return
            ops = self._pick_ops()
            if not ops:
                return
            seq = self.next_seq
            self.next_seq += 1
            slot = self.slots[seq] = Slot(self.view, seq)
            slot.ops = tuple(ops)
            self._accept(slot)

    def _pick_ops(self) -> list:
        in_flight = self._in_flight_keys()
        scratch = self.registry.copy()
        keys: set = set()
        rids: set = set()
        chosen = []
        candidates = [op for k, op in self.pending.items() if k not in in_flight]
        candidates = self.behavior.filter_proposal(self, candidates)
        for op in candidates:
            if len(chosen) >= self.config.agree_batch_max:
                break
            if isinstance(op, RequestInf) and op.request.request_id in rids:
                continue  # a second epsilon for the same request waits for the next batch
            trial = scratch.copy()
            entry = trial.apply(op, lambda k: self._seen(k) or k in keys, set(rids))
            if entry.outcome == Outcome.OK and isinstance(op, RequestInf):
                if not self._result_ready(op.request, entry.version):
                    continue
            scratch = trial
            keys.add(op.key)
            if isinstance(op, RequestInf):
                rids.add(op.request.request_id)
            chosen.append(op)
        return chosen

    def _result_ready(self, req: InferenceRequest, version: int) -> bool:
        if not self.engine.eager:
            return True  # agree/execute: execution happens after ordering starts
        if self.engine.has_result(req.request_id, version):
            return True
        if not self.engine.ensure(req, version):
            return True  # cannot execute here; order it anyway and report a missing result
        return False

    # -- acceptance and own results ---------------------------------------

    def _prior_slots_ok(self, seq: int) -> bool:
        for s in range(self.last_ordered + 1, seq):
            prior = self.slots.get(s)
            if prior is None or not prior.accepted or prior.changes_state:
                return False
        return True

    def _accept(self, slot: Slot) -> None:
        if slot.seq <= self.last_ordered:
            record = self.log.get(slot.seq)
            if record is None or ops_hash(record.ops) != ops_hash(slot.ops):
                log.error("node %d: re-proposal of ordered seq %d does not match the log", self.index, slot.seq)
                return
            slot.entries = list(record.entries)
            slot.registry_after = None
            slot.own_results = dict(record.own_results)
        else:
            registry = self.registry.copy()
            overlay: set = set()
            for s in range(self.last_ordered + 1, slot.seq):
                overlay.update(op.key for op in self.slots[s].ops)
            slot.entries = fold(registry, slot.ops, lambda k: self._seen(k) or k in overlay)
            slot.registry_after = registry
            self._preload(slot.entries)
        for op in slot.ops:
            if op.key not in self.ordered_keys and op.key not in self.pending:
                self.pending[op.key] = op
                if not self.in_view_change:
                    self._arm_op_timer(op.key)
        if slot.pp_bundle is not None:
            self._add_source(slot, primary_index(slot.view, self.config), slot.pp_bundle)
        for node, bundle in list(slot.raw_prepares.items()):
            self._on_valid_prepare(slot, bundle)
        slot.raw_prepares.clear()
        self._gather_own(slot)

    def _advance_acceptance(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for seq in sorted(self.slots):
                slot = self.slots[seq]
                if slot.accepted or slot.pp is None:
                    continue
                if seq <= self.last_ordered or self._prior_slots_ok(seq):
                    self._accept(slot)
                    progressed = True

    def _gather_own(self, slot: Slot) -> None:
        if slot.sent_own:
            return
        if slot.own_results is None:
            slot.own_results = {}
        missing = False
        for e in slot.entries:
            if not e.runs:
                continue
            rid = e.request.request_id
            if rid in slot.own_results:
                continue
            if self.engine.has_result(rid, e.version):
                slot.own_results[rid] = self.engine.result(rid, e.version)
            elif self.engine.ensure(e.request, e.version):
                missing = True
            else:
                slot.own_results[rid] = None
        slot.waiting_own = missing
        if not missing:
            self._send_own(slot)

    def on_results_ready(self) -> None:
        for seq in sorted(self.slots):
            slot = self.slots[seq]
            if slot.accepted and slot.waiting_own and not slot.sent_own:
                self._gather_own(slot)
        self.try_propose()

    def _own_bundle_results(self, slot: Slot) -> tuple:
        ordered = []
        for e in slot.entries:
            if e.runs:
                res = slot.own_results.get(e.request.request_id)
                if res is not None:
                    ordered.append(res)
        return tuple(self.behavior.own_results(self, slot, ordered))

    def _send_own(self, slot: Slot) -> None:
        slot.sent_own = True
        slot.waiting_own = False
        results = self._own_bundle_results(slot)
        leaves = self._leaves_for(slot, results)
        r_root = tree_root(leaves) if leaves is not None else tree_root([])
        r_count = len(leaves) if leaves is not None else 0
        if self.index == primary_index(slot.view, self.config):
            pp = sign_msg(self.key, PrePrepare(slot.view, slot.seq, ops_hash(slot.ops), r_root, r_count))
            bundle = PrePrepareBundle(pp, slot.ops, results)
            slot.pp, slot.pp_hash, slot.pp_bundle = pp, pre_prepare_hash(pp), bundle
            peers = [p for p in range(self.n) if p != self.index]
            for dest, b in self.behavior.pre_prepares(self, bundle, peers):
                self._send(dest, b)
            self._add_source(slot, self.index, bundle)
            self._trace("propose", view=slot.view, seq=slot.seq, ops=len(slot.ops))
        else:
            prep = sign_msg(self.key, Prepare(slot.view, slot.seq, slot.pp_hash, self.index, r_root, r_count))
            bundle = PrepareBundle(prep, results)
            self._broadcast(bundle)
            self._on_valid_prepare(slot, bundle)
        self._try_attest(slot)

    # -- result sets ------------------------------------------------------

    def _leaves_for(self, slot: Slot, results) -> Optional[list]:
        by_rid = {}
        for e in slot.entries:
            if e.runs:
                by_rid[e.request.request_id] = e
        leaves = []
        seen = set()
        for res in results:
            e = by_rid.get(res.request_id)
            if e is None or res.request_id in seen:
                return None
            seen.add(res.request_id)
            leaves.append(result_leaf(e.request, res))
        return leaves

    def _result_ok(self, res: InferenceResult, e: Entry, node: int) -> bool:
        g = e.group
        return (
            res.node_index == node
            and res.group_id == g.group_id
            and res.group_version == g.version
            and len(res.output) == g.output_dim
            and all(math.isfinite(v) for v in res.output)
            and any(m.weights_digest == res.model_digest for m in g.models)
        )

    def _add_source(self, slot: Slot, node: int, bundle) -> None:
        if node in slot.sources:
            return
        msg = bundle.pre_prepare if isinstance(bundle, PrePrepareBundle) else bundle.prepare
        slot.heard.add(node)
        leaves = self._leaves_for(slot, bundle.results)
        if leaves is None or tree_root(leaves) != msg.r_root or len(leaves) != msg.r_count:
            self._trace("bad_results", seq=slot.seq, node=node)
            return
        results = {}
        all_valid = bool(leaves)
        for i, res in enumerate(bundle.results):
            e = slot.entry_for(res.request_id)
            if self._result_ok(res, e, node):
                results[res.request_id] = (res, i)
            else:
                all_valid = False
        slot.sources[node] = Source(
            node, msg.r_root, bundle, leaves, merkle.build(leaves) if leaves else None, results, all_valid
        )
        self._recheck_pending_commits(slot)
        self.on_slot_update(slot)

    # -- PRE-PREPARE --------------------------------------------------------

    def on_pre_prepare(self, sender: int, bundle: PrePrepareBundle) -> None:
        pp = bundle.pre_prepare
        if pp.view != self.view or self.in_view_change:
            return
        primary = primary_index(pp.view, self.config)
        if not self._valid(pp, primary):
            return
        if ops_hash(bundle.ops) != pp.ops_hash or len(bundle.ops) > self.config.agree_batch_max:
            return
        decided = self.nv_batches.get(pp.seq)
        if decided is not None and ops_hash(decided) != pp.ops_hash:
            return
        if pp.seq <= self.nv_low and self.view > 0:
            return
        slot = self._slot(pp.seq)
        if slot is None:
            return
        h = pre_prepare_hash(pp)
        if slot.pp is not None:
            if slot.pp_hash != h:
                self._equivocation(slot.pp, pp)
            return
        if pp.seq <= self.last_ordered and decided is None:
            return
        slot.pp, slot.pp_hash, slot.ops, slot.pp_bundle = pp, h, tuple(bundle.ops), bundle
        slot.heard.add(primary)
        # messages that raced ahead of the proposal
        for node, b in list(slot.raw_prepares.items()):
            if b.prepare.pp_hash != h:
                del slot.raw_prepares[node]
        for node, b in list(slot.raw_commits.items()):
            if b.commit.pp_hash == h:
                slot.pending_commits[node] = b
        slot.raw_commits.clear()
        self._advance_acceptance()
        self._recheck_pending_commits(slot)
        self._try_order()

    def _equivocation(self, a: PrePrepare, b: PrePrepare) -> None:
        key = (a.view, a.seq)
        if key in self.evidence:
            return
        self.evidence[key] = (a, b)
        self._trace("equivocation", view=a.view, seq=a.seq)
        if a.view == self.view:
            self.start_view_change(self.view + 1)

    # -- PREPARE ----------------------------------------------------------

    def on_prepare(self, sender: int, bundle: PrepareBundle) -> None:
        p = bundle.prepare
        if p.view != self.view or self.in_view_change:
            return
        if p.node == primary_index(p.view, self.config) or not self._valid(p, p.node):
            return
        slot = self._slot(p.seq)
        if slot is None or p.node in slot.prepares:
            return
        if slot.pp is None:
            slot.raw_prepares[p.node] = bundle
            self._fetch_batch(slot, sender)
            return
        if p.pp_hash != slot.pp_hash:
            self._fetch_batch(slot, sender, force=True)
            return
        if not slot.accepted:
            slot.raw_prepares[p.node] = bundle
            return
        self._on_valid_prepare(slot, bundle)
        self._try_attest(slot)

    def _on_valid_prepare(self, slot: Slot, bundle: PrepareBundle) -> None:
        p = bundle.prepare
        if p.pp_hash != slot.pp_hash or p.node in slot.prepares:
            return
        slot.prepares[p.node] = p
        slot.heard.add(p.node)
        self._add_source(slot, p.node, bundle)
        if len(slot.prepares) >= self.config.quorum - 1 and slot.pp is not None:
            current = self.prepared_proofs.get(slot.seq)
            if current is None or current.pre_prepare.view <= slot.view:
                self.prepared_proofs[slot.seq] = PreparedProof(
                    slot.pp, slot.ops, tuple(slot.prepares[k] for k in sorted(slot.prepares))
                )

    def _fetch_batch(self, slot: Slot, sender: int, force: bool = False) -> None:
        key = ("batch", sender)
        if key in slot.fetch_sent or not isinstance(sender, int):
            return
        if not force and len(slot.fetch_sent) >= self.f + 1:
            return
        slot.fetch_sent.add(key)
        self._send(sender, FetchBatch(slot.view, slot.seq))

    def on_fetch_batch(self, sender: int, req: FetchBatch) -> None:
        bundle = None
        if req.view == self.view and req.seq in self.slots:
            bundle = self.slots[req.seq].pp_bundle
        if bundle is None:
            record = self.log.get(req.seq)
            if record and record.view == req.view and record.slot is not None:
                bundle = record.slot.pp_bundle
        if bundle is not None:
            self._send(sender, bundle)

    def on_fetch_result(self, sender: int, req: FetchResult) -> None:
        slot = self.slots.get(req.seq)
        if slot is None or slot.view != req.view:
            record = self.log.get(req.seq)
            slot = record.slot if record else None
        if slot is None or slot.pp_hash != req.pp_hash:
            return
        src = slot.sources.get(req.node)
        if src is not None:
            self._send(sender, src.bundle)

    # -- attestation ------------------------------------------------------

    def _try_attest(self, slot: Slot) -> None:
        if slot.sent_commit or not slot.accepted or not slot.sent_own or slot.pp is None:
            return
        prepared = 1 + len(slot.prepares) >= self.config.quorum
        if not prepared:
            return
        everyone = len(slot.heard) >= self.n
        undecided = False
        attest_all = self.behavior.attest_everything(self)
        for e in slot.entries:
            if not e.runs:
                continue
            rid = e.request.request_id
            if rid in slot.decisions:
                continue
            outputs = {n: src.results[rid][0].output for n, src in slot.sources.items() if rid in src.results}
            if attest_all:
                slot.decisions[rid] = (Outcome.OK, tuple(sorted(outputs)))
                continue
            outcome = None
            if len(outputs) >= self.config.quorum:
                metric = e.group.distance.metric
                try:
                    outcome = select_quorum(outputs, self.n, self.f, metric, e.epsilon)
                except InsufficientResults:
                    outcome = None
            if outcome is not None and outcome.satisfied:
                slot.decisions[rid] = (Outcome.OK, outcome.selected)
            elif everyone or slot.deadline_passed:
                slot.decisions[rid] = (Outcome.NO_QUORUM, ())
            else:
                undecided = True
        if undecided:
            if not slot.deadline_armed:
                slot.deadline_armed = True
                self.net.schedule(self.attest_wait, lambda: self._attest_deadline(slot))
            return
        self._send_commit(slot)

    def _attest_deadline(self, slot: Slot) -> None:
        slot.deadline_passed = True
        if self.slots.get(slot.seq) is slot:
            self._try_attest(slot)

    def _attest_leaves(self, slot: Slot) -> list:
        selected_by_node: dict[int, list] = {}
        for e in slot.entries:
            if not e.runs:
                continue
            outcome, nodes = slot.decisions[e.request.request_id]
            if outcome == Outcome.OK:
                for node in nodes:
                    selected_by_node.setdefault(node, []).append(e.request.request_id)
        leaves = []
        for node in sorted(selected_by_node):
            src = slot.sources[node]
            rids = selected_by_node[node]
            if src.all_valid and len(rids) == len(src.leaves):
                leaves.append(BatchAttestation(node, src.r_root))
            else:
                for rid in sorted(rids, key=lambda r: src.results[r][1]):
                    leaves.append(ResultAttestation(node, digest(src.leaves[src.results[rid][1]])))
        for e in slot.entries:
            if e.outcome == Outcome.REJECTED and isinstance(e.op, RequestInf):
                leaves.append(StatusAttestation(request_digest(e.request), Outcome.REJECTED))
            elif e.runs and slot.decisions[e.request.request_id][0] == Outcome.NO_QUORUM:
                leaves.append(StatusAttestation(request_digest(e.request), Outcome.NO_QUORUM))
        return leaves

    def _send_commit(self, slot: Slot) -> None:
        slot.sent_commit = True
        leaves = self._attest_leaves(slot)
        raw = [attest_leaf_bytes(x) for x in leaves]
        commit = sign_msg(self.key, Commit(slot.view, slot.seq, slot.pp_hash, self.index, tree_root(raw), len(raw)))
        bundle = CommitBundle(commit, tuple(leaves))
        slot.commits[self.index] = CommitRecord(commit, leaves, merkle.build(raw) if raw else None)
        decisions = []
        for e in slot.entries:
            if not e.runs:
                continue
            rid = e.request.request_id
            outcome, sel = slot.decisions[rid]
            outputs = [slot.sources[k].results[rid][0].output for k in sel]
            decisions.append((rid, int(outcome), list(sel), outputs, e.epsilon, int(e.group.distance.metric)))
        self._trace("attest", view=slot.view, seq=slot.seq, decisions=decisions)
        self._broadcast(bundle)
        self.on_slot_update(slot)
        self._try_order()

    # -- COMMIT -----------------------------------------------------------

    def on_commit(self, sender: int, bundle: CommitBundle) -> None:
        c = bundle.commit
        if not self._valid(c, c.node):
            return
        slot = self.slots.get(c.seq)
        if slot is None or slot.view != c.view:
            record = self.log.get(c.seq)
            if record is not None and record.slot is not None and record.view == c.view:
                slot = record.slot  # late commit for an ordered batch: still useful to the proxy
            elif c.view != self.view or self.in_view_change:
                return
            else:
                slot = self._slot(c.seq)
                if slot is None:
                    return
        if c.node in slot.commits:
            return
        if slot.pp is None:
            slot.raw_commits[c.node] = bundle
            self._fetch_batch(slot, sender)
            self._maybe_catch_up(slot)
            return
        if c.pp_hash != slot.pp_hash:
            self._fetch_batch(slot, sender, force=True)
            return
        slot.pending_commits[c.node] = bundle
        self._recheck_pending_commits(slot, fetch_from=sender)
        self._try_order()

    def _recheck_pending_commits(self, slot: Slot, fetch_from=None) -> None:
        if not slot.accepted:
            return
        changed = False
        for node, bundle in list(slot.pending_commits.items()):
            raw = [attest_leaf_bytes(x) for x in bundle.attestations]
            if tree_root(raw) != bundle.commit.a_root or len(raw) != bundle.commit.a_count:
                del slot.pending_commits[node]
                continue
            missing = []
            for leaf in bundle.attestations:
                if isinstance(leaf, (ResultAttestation, BatchAttestation)):
                    src = slot.sources.get(leaf.node)
                    if src is None:
                        missing.append(leaf.node)
                    elif isinstance(leaf, BatchAttestation) and src.r_root != leaf.r_root:
                        missing.append(None)
                    elif isinstance(leaf, ResultAttestation) and leaf.leaf_digest not in src.leaf_digests:
                        missing.append(None)
            if None in missing:
                # attests something that contradicts a signed result set: never counted
                del slot.pending_commits[node]
                continue
            if missing:
                target = fetch_from if fetch_from is not None else node
                for m in sorted(set(missing)):
                    key = ("result", m)
                    if key not in slot.fetch_sent:
                        slot.fetch_sent.add(key)
                        self._send(target, FetchResult(slot.view, slot.seq, slot.pp_hash, m))
                continue
            del slot.pending_commits[node]
            slot.commits[node] = CommitRecord(bundle.commit, list(bundle.attestations), merkle.build(raw) if raw else None)
            changed = True
        if changed:
            self.on_slot_update(slot)
            if slot.ordered:
                record = self.log.get(slot.seq)
                if record is not None and record.slot is slot:
                    record.commits = tuple(slot.commits[k].commit for k in sorted(slot.commits))

    # -- ordering ---------------------------------------------------------

    def _try_order(self) -> None:
        while True:
            slot = self.slots.get(self.last_ordered + 1)
            if slot is None or not slot.accepted or slot.ordered or slot.view != self.view:
                break
            if len(slot.commits) < self.config.quorum:
                break
            self._order(slot, slot.entries, slot.registry_after)
        self._advance_acceptance()
        self.try_propose()

    def _order(self, slot: Optional[Slot], entries, registry_after: GroupRegistry, pp=None, ops=None, commits=None) -> None:
        pp = pp or slot.pp
        ops = ops if ops is not None else slot.ops
        if commits is None:
            commits = tuple(slot.commits[k].commit for k in sorted(slot.commits))
        seq = pp.seq
        record = OrderedBatch(pp.view, seq, pp, tuple(ops), list(entries), commits, slot,
                              dict(slot.own_results or {}) if slot else {})
        self.log[seq] = record
        if slot is not None:
            slot.ordered = True
        self.last_ordered = seq
        self.registry = registry_after
        self._sync_engine()
        for e in entries:
            key = e.op.key
            if e.outcome != Outcome.DUPLICATE:
                self.ordered_keys[key] = (pp.view, seq)
            self.pending.pop(key, None)
            timer = self.op_timers.pop(key, None)
            if timer is not None:
                timer.cancel()
        still_needed = {op.request.request_id for op in self.pending.values() if isinstance(op, RequestInf)}
        for e in entries:
            if isinstance(e.op, RequestInf) and e.op.request.request_id not in still_needed:
                self.engine.ordered(e.op.request.request_id)
        self.state_digest = digest(self.state_digest + pp.ops_hash)
        self._trace("order", view=pp.view, seq=seq, ops_hash=pp.ops_hash,
                    outcomes=[int(e.outcome) for e in entries], versions=[e.version for e in entries])
        if seq % self.config.checkpoint_interval == 0:
            ck = sign_msg(self.key, Checkpoint(seq, self.state_digest, self.index))
            self._broadcast(ck)
            self._on_checkpoint(ck)
        self.on_ordered(record)

    def _preload(self, entries) -> None:
        # a version defined in this batch may serve requests later in the same batch
        for e in entries:
            if e.outcome == Outcome.OK and isinstance(e.op, DefineGroup):
                self._load(e.group)

    def _load(self, group: ModelGroup) -> bool:
        if group.version in self.engine.groups.get(group.group_id, {}):
            return True
        try:
            self.engine.load_group(ModelGroup(group.group_id, group.version, group.models, group.distance))
        except Exception as exc:
            log.warning("node %d cannot load %s v%d: %s", self.index, group.group_id, group.version, exc)
            return False
        return True

    def _sync_engine(self) -> None:
        for group in self.registry.all_groups():
            known = self.engine.groups.get(group.group_id, {}).get(group.version)
            if known is None:
                if group.status == GroupStatus.RETIRED or not self._load(group):
                    continue
                known = self.engine.groups[group.group_id][group.version]
            if known.status != group.status:
                self.engine.set_status(group.group_id, group.version, group.status)

    # -- checkpoints and state transfer -----------------------------------

    def on_checkpoint(self, sender: int, ck: Checkpoint) -> None:
        if self._valid(ck, ck.node):
            self._on_checkpoint(ck)

    def _on_checkpoint(self, ck: Checkpoint) -> None:
        if ck.seq <= self.stable_seq:
            return
        votes = self.checkpoints.setdefault(ck.seq, {})
        votes[ck.node] = ck
        matching = [c for c in votes.values() if c.state_digest == ck.state_digest]
        if len(matching) >= self.config.quorum:
            self.stable_seq = ck.seq
            self.stable_digest = ck.state_digest
            self.stable_proof = tuple(sorted(matching, key=lambda c: c.node))
            for s in [s for s in self.checkpoints if s <= ck.seq]:
                del self.checkpoints[s]
            for s in [s for s in self.prepared_proofs if s <= ck.seq]:
                del self.prepared_proofs[s]
            self._gc()
            if ck.seq > self.last_ordered:
                self._request_catch_up(ck.seq, [c.node for c in matching])

    def _gc(self) -> None:
        horizon = self.stable_seq - 2 * self.config.checkpoint_interval
        for seq, record in self.log.items():
            if seq <= horizon and record.slot is not None:
                record.slot = None

    def _maybe_catch_up(self, slot: Slot) -> None:
        if slot.seq <= self.last_ordered + 1:
            return
        voters = [n for n, b in slot.raw_commits.items()]
        if len(voters) >= self.f + 1:
            self._request_catch_up(slot.seq - 1, voters)

    def _request_catch_up(self, target: int, peers) -> None:
        self.catch_up_target = max(self.catch_up_target, target)
        if self.catch_up_inflight or self.last_ordered >= self.catch_up_target:
            return
        peers = [p for p in peers if p != self.index]
        if not peers:
            return
        self.catch_up_inflight = True
        self._catch_up_peers = peers
        for p in peers[: self.f + 1]:
            self._send(p, FetchOrdered(self.last_ordered + 1))
        self.net.schedule(self.config.view_timeout / 2, self._catch_up_retry)

    def _catch_up_retry(self) -> None:
        self.catch_up_inflight = False
        if self.last_ordered < self.catch_up_target:
            self._request_catch_up(self.catch_up_target, getattr(self, "_catch_up_peers", []))

    def on_fetch_ordered(self, sender: int, req: FetchOrdered) -> None:
        record = self.log.get(req.seq)
        if record is not None and len(record.commits) >= self.config.quorum:
            self._send(sender, OrderedProof(record.pp, record.ops, record.commits))

    def on_ordered_proof(self, sender: int, proof: OrderedProof) -> None:
        pp = proof.pre_prepare
        if pp.seq != self.last_ordered + 1:
            return
        if not self._valid(pp, primary_index(pp.view, self.config)) or ops_hash(proof.ops) != pp.ops_hash:
            return
        h = pre_prepare_hash(pp)
        voters = {c.node for c in proof.commits
                  if c.pp_hash == h and c.seq == pp.seq and c.view == pp.view and self._valid(c, c.node)}
        if len(voters) < self.config.quorum:
            return
        registry = self.registry.copy()
        entries = fold(registry, proof.ops, self._seen)
        slot = self.slots.get(pp.seq)
        if slot is not None and slot.pp_hash != h:
            slot = None
        self._trace("catch_up", seq=pp.seq)
        self._order(slot, entries, registry, pp=pp, ops=proof.ops, commits=proof.commits)
        if slot is not None:
            slot.entries = slot.entries or entries
        self.catch_up_inflight = False
        if self.last_ordered < self.catch_up_target:
            self._send(sender, FetchOrdered(self.last_ordered + 1))
            self.catch_up_inflight = True
        self._advance_acceptance()
        self._try_order()

    # -- view change ------------------------------------------------------

    def start_view_change(self, new_view: int) -> None:
        if new_view <= self.view or (self.in_view_change and new_view <= self.vc_target):
            return
        self.in_view_change = True
        self.vc_target = new_view
        for timer in self.op_timers.values():
            timer.cancel()
        self.op_timers.clear()
        if self.vc_timer is not None:
            self.vc_timer.cancel()
        evidence = ()
        for (v, _seq), pair in sorted(self.evidence.items()):
            if v == self.view:
                evidence = pair
                break
        prepared = tuple(
            self.prepared_proofs[s] for s in sorted(self.prepared_proofs) if s > self.stable_seq
        )
        vc = sign_msg(self.key, ViewChange(
            new_view, self.index, self.stable_seq, self.stable_digest, self.stable_proof, prepared, evidence
        ))
        self._trace("view_change", view=self.view, new_view=new_view)
        self._broadcast(vc)
        self._record_view_change(vc)
        backoff = self.config.view_timeout * (2 ** min(new_view - self.view, 6))
        self.vc_timer = self.net.schedule(backoff, lambda: self._vc_timeout(new_view))

    def _vc_timeout(self, target: int) -> None:
        if self.in_view_change and self.vc_target == target:
            self.start_view_change(target + 1)

    def _vc_valid(self, vc: ViewChange) -> bool:
        if not self._valid(vc, vc.node):
            return False
        if vc.checkpoint_seq == 0:
            if vc.checkpoint_digest != GENESIS_DIGEST or vc.checkpoint_proof:
                return False
        else:
            signers = {c.node for c in vc.checkpoint_proof
                       if c.seq == vc.checkpoint_seq and c.state_digest == vc.checkpoint_digest and self._valid(c, c.node)}
            if len(signers) < self.config.quorum:
                return False
        seen_seqs = set()
        for proof in vc.prepared:
            pp = proof.pre_prepare
            if pp.seq <= vc.checkpoint_seq or pp.view >= vc.new_view or pp.seq in seen_seqs:
                return False
            seen_seqs.add(pp.seq)
            primary = primary_index(pp.view, self.config)
            if not self._valid(pp, primary) or ops_hash(proof.ops) != pp.ops_hash:
                return False
            h = pre_prepare_hash(pp)
            preparers = {p.node for p in proof.prepares
                         if p.pp_hash == h and p.view == pp.view and p.seq == pp.seq
                         and p.node != primary and self._valid(p, p.node)}
            if len(preparers) < self.config.quorum - 1:
                return False
        return True

    def _evidence_valid(self, evidence) -> bool:
        if len(evidence) != 2:
            return False
        a, b = evidence
        if (a.view, a.seq) != (b.view, b.seq) or pre_prepare_hash(a) == pre_prepare_hash(b):
            return False
        primary = primary_index(a.view, self.config)
        return self._valid(a, primary) and self._valid(b, primary)

    def on_view_change(self, sender: int, vc: ViewChange) -> None:
        if vc.new_view <= self.view or not self._vc_valid(vc):
            return
        if vc.evidence and self._evidence_valid(vc.evidence) and vc.evidence[0].view == self.view:
            # a signed equivocation convicts the current primary on its own
            self.start_view_change(self.view + 1)
        self._record_view_change(vc)

    def _record_view_change(self, vc: ViewChange) -> None:
        self.view_changes.setdefault(vc.new_view, {})[vc.node] = vc
        # join once f+1 nodes are known to have moved past the current view
        movers: dict[int, int] = {}
        for v, vcs in self.view_changes.items():
            if v > self.view:
                for node in vcs:
                    movers[node] = min(movers.get(node, v), v)
        if len(movers) >= self.f + 1:
            target = sorted(movers.values())[self.f] if len(movers) > self.f else min(movers.values())
            target = min(target, min(movers.values())) if not self.in_view_change else target
            if not self.in_view_change or target > self.vc_target:
                if target > self.view:
                    self.start_view_change(max(target, min(movers.values())))
        v = vc.new_view
        if (
            primary_index(v, self.config) == self.index
            and v not in self.new_view_sent
            and v > self.view
            and self.in_view_change
            and self.vc_target == v
            and len(self.view_changes.get(v, {})) >= self.config.quorum
        ):
            self._send_new_view(v)

    @staticmethod
    def compute_reproposals(vcs) -> tuple[int, tuple]:
        low = max(vc.checkpoint_seq for vc in vcs)
        best: dict[int, PreparedProof] = {}
        for vc in vcs:
            for proof in vc.prepared:
                pp = proof.pre_prepare
                if pp.seq <= low:
                    continue
                cur = best.get(pp.seq)
                if cur is None or pp.view > cur.pre_prepare.view:
                    best[pp.seq] = proof
        high = max(best, default=low)
        batches = tuple(
            Reproposal(s, best[s].ops if s in best else ()) for s in range(low + 1, high + 1)
        )
        return low, batches

    def _send_new_view(self, v: int) -> None:
        self.new_view_sent.add(v)
        vcs = tuple(self.view_changes[v][k] for k in sorted(self.view_changes[v]))
        _low, batches = self.compute_reproposals(vcs)
        nv = sign_msg(self.key, NewView(v, vcs, batches))
        self._broadcast(nv)
        self._install_view(nv)

    def on_new_view(self, sender: int, nv: NewView) -> None:
        if nv.view <= self.view:
            return
        if not self._valid(nv, primary_index(nv.view, self.config)):
            return
        nodes = set()
        for vc in nv.view_changes:
            if vc.new_view != nv.view or vc.node in nodes or not self._vc_valid(vc):
                self.start_view_change(nv.view + 1)
                return
            nodes.add(vc.node)
        if len(nodes) < self.config.quorum:
            return
        _low, batches = self.compute_reproposals(nv.view_changes)
        if batches != nv.batches:
            self._trace("bad_new_view", view=nv.view)
            self.start_view_change(nv.view + 1)
            return
        self._install_view(nv)

    def _install_view(self, nv: NewView) -> None:
        low, batches = self.compute_reproposals(nv.view_changes)
        self._trace("new_view", view=nv.view, low=low, batches=len(batches))
        self.view = nv.view
        self.in_view_change = False
        self.vc_target = nv.view
        if self.vc_timer is not None:
            self.vc_timer.cancel()
            self.vc_timer = None
        for v in [v for v in self.view_changes if v <= nv.view]:
            del self.view_changes[v]
        self.slots = {}
        self.nv_low = low
        self.nv_batches = {b.seq: b.ops for b in batches}
        self.next_seq = max([low] + [b.seq for b in batches]) + 1
        if low > self.last_ordered:
            holders = [vc.node for vc in nv.view_changes if vc.checkpoint_seq == low]
            self._request_catch_up(low, holders)
        for key in list(self.pending):
            if key not in self.ordered_keys:
                self._arm_op_timer(key)
        if self.is_primary:
            for b in batches:
                slot = self.slots[b.seq] = Slot(self.view, b.seq)
                slot.ops = tuple(b.ops)
            self._advance_primary_reproposals()
        self.try_propose()

    def _advance_primary_reproposals(self) -> None:
        for seq in sorted(self.slots):
            slot = self.slots[seq]
            if slot.accepted or slot.pp is not None:
                continue
            if seq <= self.last_ordered or self._prior_slots_ok(seq):
                self._accept(slot)

    # -- dispatch ---------------------------------------------------------

    def receive(self, sender, payload) -> bool:
        handler = _HANDLERS.get(type(payload))
        if handler is None:
            return False
        handler(self, sender, payload)
        # a fetched result set or a late commit may complete the next batch
        self._try_order()
        return True


_HANDLERS = {
    PrePrepareBundle: Coordinator.on_pre_prepare,
    PrepareBundle: Coordinator.on_prepare,
    CommitBundle: Coordinator.on_commit,
    FetchBatch: Coordinator.on_fetch_batch,
    FetchResult: Coordinator.on_fetch_result,
    Checkpoint: Coordinator.on_checkpoint,
    ViewChange: Coordinator.on_view_change,
    NewView: Coordinator.on_new_view,
    FetchOrdered: Coordinator.on_fetch_ordered,
    OrderedProof: Coordinator.on_ordered_proof,
}
