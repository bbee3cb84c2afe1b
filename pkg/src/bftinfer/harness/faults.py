"""Byzantine behaviours plugged into a node's coordinator and proxy hooks."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from ..agreement import Behavior
from ..domain import UPDATE_OPS
from ..messages import (
    Checkpoint,
    CommitBundle,
    NewView,
    PrepareBundle,
    PrePrepare,
    PrePrepareBundle,
    ViewChange,
    ops_hash,
    sign_msg,
)


class ShiftExecutor:
    """Adds a constant to every output value."""

    def __init__(self, base, shift: float):
        self.base = base
        self.shift = shift

    def run(self, model, inputs):
        return [tuple(v + self.shift for v in y) for y in self.base.run(model, inputs)]


class CorruptResult(Behavior):
    """Shifts every output it computes by ``magnitude`` and attests every result it hears.

    ``beyond`` only labels the intent; whether the shift breaks the bound
    depends on the group's epsilon, which the scenario picks to match.
    """

    def __init__(self, magnitude: float, beyond: bool):
        self.magnitude = magnitude
        self.beyond = beyond
        self.name = f"corrupt_result({magnitude},{'beyond' if beyond else 'within'})"

    def executor(self, base):
        return ShiftExecutor(base, self.magnitude)

    def attest_everything(self, coord) -> bool:
        return True


class Equivocate(Behavior):
    """As primary, sends one proposal to half of the backups and a different one to the rest."""

    name = "equivocate"

    def pre_prepares(self, coord, bundle, peers):
        if len(bundle.ops) < 1:
            return super().pre_prepares(coord, bundle, peers)
        pp = bundle.pre_prepare
        alt_ops = tuple(reversed(bundle.ops)) if len(bundle.ops) > 1 else ()
        alt_results = bundle.results if len(bundle.ops) > 1 else ()
        alt_pp = sign_msg(coord.key, PrePrepare(pp.view, pp.seq, ops_hash(alt_ops), pp.r_root, pp.r_count))
        alt = PrePrepareBundle(alt_pp, alt_ops, alt_results)
        half = len(peers) // 2
        return [(p, bundle) for p in peers[:half + 1]] + [(p, alt) for p in peers[half + 1:]]


class MutePrimary(Behavior):
    """Never proposes while primary; otherwise follows the protocol."""

    name = "mute_primary"

    def filter_proposal(self, coord, ops):
        return []


@dataclass
class DropFraction(Behavior):
    p: float
    seed: int = 0
    rng: random.Random = field(init=False)

    def __post_init__(self):
        self.rng = random.Random(self.seed)
        self.name = f"drop_fraction({self.p})"

    def outgoing(self, coord, dest, payload):
        return None if self.rng.random() < self.p else payload


def _garble(sig: bytes) -> bytes:
    return bytes(b ^ 0x5A for b in sig) if sig else b"\x00" * 64


class BadSignature(Behavior):
    """Every signature it sends is garbage."""

    name = "bad_signature"

    def outgoing(self, coord, dest, payload):
        if isinstance(payload, PrePrepareBundle):
            pp = payload.pre_prepare
            return replace(payload, pre_prepare=replace(pp, sig=_garble(pp.sig)))
        if isinstance(payload, PrepareBundle):
            p = payload.prepare
            return replace(payload, prepare=replace(p, sig=_garble(p.sig)))
        if isinstance(payload, CommitBundle):
            c = payload.commit
            return replace(payload, commit=replace(c, sig=_garble(c.sig)))
        if isinstance(payload, (Checkpoint, ViewChange, NewView)):
            return replace(payload, sig=_garble(payload.sig))
        return payload


class StaleVersionPrimary(Behavior):
    """As primary, censors group updates and reports results as if from the previous version."""

    name = "stale_version_primary"

    def filter_proposal(self, coord, ops):
        if not coord.is_primary:
            return ops
        return [op for op in ops if not isinstance(op, UPDATE_OPS)]

    def own_results(self, coord, slot, results):
        if not coord.is_primary:
            return results
        return [replace(r, group_version=max(1, r.group_version - 1)) for r in results]


class MuteProxy(Behavior):
    """The node's proxy silently discards client submissions."""

    name = "mute_proxy"

    def forwards_client_requests(self) -> bool:
        return False


def make_behavior(spec: str, seed: int = 0) -> Behavior:
    """Parse ``honest``, ``corrupt_result:0.5:beyond``, ``drop_fraction:0.3`` and the plain names."""
    name, *args = spec.split(":")
    if name == "honest":
        return Behavior()
    if name == "corrupt_result":
        magnitude = float(args[0]) if args else 1.0
        beyond = (args[1] if len(args) > 1 else "beyond") == "beyond"
        return CorruptResult(magnitude, beyond)
    if name == "equivocate":
        return Equivocate()
    if name == "mute_primary":
        return MutePrimary()
    if name == "drop_fraction":
        return DropFraction(float(args[0]) if args else 0.5, seed)
    if name == "bad_signature":
        return BadSignature()
    if name == "stale_version_primary":
        return StaleVersionPrimary()
    if name == "mute_proxy":
        return MuteProxy()
    raise ValueError(f"unknown behaviour {spec!r}")


CATALOGUE = (
    "corrupt_result:0.05:within",
    "corrupt_result:5.0:beyond",
    "equivocate",
    "mute_primary",
    "drop_fraction:0.3",
    "bad_signature",
    "stale_version_primary",
    "mute_proxy",
)
