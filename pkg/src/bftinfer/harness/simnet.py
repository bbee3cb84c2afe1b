"""Deterministic virtual-time network.

Events live in one heap ordered by ``(time, insertion counter)``. Per-link
delivery is FIFO: a message never overtakes an earlier one on the same
directed link. Latency, drops and partitions come from one seeded RNG, so a
seed plus a schedule fully determines the delivery order.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import codec
from ..messages import decode_payload, encode_payload


class Timer:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn):
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(frozen=True)
class TraceEvent:
    time: float
    actor: str
    kind: str
    body: str  # sorted-key JSON of the event fields


def _plain(value):
    if isinstance(value, (bytes, bytearray)):
        return value.hex()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and value != value:
        return "nan"
    return value


class TraceLog:
    """Events in emission order; serialises to one hex-encoded canonical record per line."""

    def __init__(self):
        self.events: list[TraceEvent] = []

    def add(self, time: float, actor, kind: str, fields: dict) -> None:
        body = json.dumps(_plain(fields), sort_keys=True, separators=(",", ":"))
        self.events.append(TraceEvent(time, str(actor), kind, body))

    def of_kind(self, kind: str):
        return [e for e in self.events if e.kind == kind]

    def lines(self) -> list[str]:
        return [codec.encode(e).hex() for e in self.events]

    def dump(self) -> str:
        return "\n".join(self.lines()) + ("\n" if self.events else "")

    @staticmethod
    def parse(text: str) -> list[TraceEvent]:
        return [codec.decode(bytes.fromhex(line), TraceEvent) for line in text.splitlines() if line]


@dataclass
class Partition:
    start: float
    end: float
    side: frozenset  # addresses cut off from everyone else during [start, end)


@dataclass
class LinkModel:
    base: float = 0.001
    jitter: float = 0.0005
    drop: float = 0.0


class SimNet:
    def __init__(self, seed: int = 0, link: LinkModel = LinkModel(), wire: bool = True, trace_sends: bool = False):
        self.rng = random.Random(seed)
        self.link = link
        self.links: dict[tuple, LinkModel] = {}
        self.partitions: list[Partition] = []
        self.wire = wire
        self.trace_sends = trace_sends
        self.time = 0.0
        self._heap: list = []
        self._counter = 0
        self._last: dict[tuple, float] = {}
        self.handlers: dict = {}
        self.trace = TraceLog()
        self.sent = 0
        self.bytes_sent = 0
        self.dropped = 0

    # -- clock and timers -------------------------------------------------

    def now(self) -> float:
        return self.time

    def schedule(self, delay: float, fn: Callable[[], None]) -> Timer:
        timer = Timer(fn)
        self._push(self.time + max(0.0, delay), timer)
        return timer

    def _push(self, when: float, timer: Timer) -> None:
        self._counter += 1
        heapq.heappush(self._heap, (when, self._counter, timer))

    # -- endpoints --------------------------------------------------------

    def register(self, addr, handler: Callable) -> "Endpoint":
        self.handlers[addr] = handler
        return Endpoint(self, addr)

    def _cut(self, src, dest) -> bool:
        for p in self.partitions:
            if p.start <= self.time < p.end and ((src in p.side) != (dest in p.side)):
                return True
        return False

    def send(self, src, dest, payload) -> None:
        if dest not in self.handlers:
            return
        self.sent += 1
        if self.wire:
            data = encode_payload(payload)
            self.bytes_sent += len(data)
        else:
            data = payload
        if self.trace_sends:
            self.trace.add(self.time, src, "send", {"to": str(dest), "type": type(payload).__name__})
        model = self.links.get((src, dest), self.link)
        if src == dest:
            delay = 0.0
        else:
            delay = model.base + (self.rng.random() * model.jitter if model.jitter else 0.0)
            if (model.drop and self.rng.random() < model.drop) or self._cut(src, dest):
                self.dropped += 1
                return
        link = (src, dest)
        when = max(self.time + delay, self._last.get(link, 0.0))
        self._last[link] = when
        handler = self.handlers[dest]
        wire = self.wire

        def deliver():
            msg = decode_payload(data) if wire else data
            handler(src, msg)

        self._push(when, Timer(deliver))

    # -- running ----------------------------------------------------------

    def run(self, until: float, stop: Optional[Callable[[], bool]] = None, check_every: int = 1) -> str:
        """Process events up to virtual time ``until``.

        Returns ``"done"`` when ``stop()`` became true, ``"deadline"`` when time
        ran out and ``"idle"`` when nothing was left to do before either.
        """
        steps = 0
        while self._heap:
            if stop is not None and steps % check_every == 0 and stop():
                return "done"
            when, _, timer = self._heap[0]
            if when > until:
                self.time = until
                return "done" if stop is not None and stop() else "deadline"
            heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.time = when
            timer.fn()
            steps += 1
        if stop is not None and stop():
            return "done"
        return "idle"


@dataclass
class Endpoint:
    """The env handed to one actor: its own address bound into every call."""

    net: SimNet
    addr: object
    muted_trace: bool = False
    extra: dict = field(default_factory=dict)

    def send(self, dest, payload) -> None:
        self.net.send(self.addr, dest, payload)

    def schedule(self, delay: float, fn) -> Timer:
        return self.net.schedule(delay, fn)

    def now(self) -> float:
        return self.net.time

    def trace(self, kind: str, **fields) -> None:
        if not self.muted_trace:
            self.net.trace.add(self.net.time, self.addr, kind, fields)
