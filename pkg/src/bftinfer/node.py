"""A full node: inference engine, agreement coordinator and inference proxy.

The node talks to the outside world only through an ``env`` object:

* ``env.send(dest, payload)``: deliver to a node index or a client address;
* ``env.schedule(delay, fn)``: run ``fn`` later, returns a handle with ``cancel()``;
* ``env.now()``: current time in seconds;
* ``env.trace(kind, **fields)``: record an event.

The simulator and the socket daemon both provide one, so protocol code is
the same in both modes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from .agreement import Behavior, Coordinator
from .crypto import KeyPair
from .domain import ClusterConfig, RequestInf
from .inference import InferenceEngine, ModelExecutor, ModelStore, SubmitError
from .messages import Forward
from .proxy import Proxy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostModel:
    """Synthetic accelerator time for one execution batch: ``fixed + per_item * size``."""

    fixed: float = 0.0032
    per_item: float = 0.0004
    flush_delay: float = 0.005  # wait this long for a batch to fill before running it partially

    def cost(self, size: int) -> float:
        return self.fixed + self.per_item * size if size else 0.0


ZERO_COST = CostModel(0.0, 0.0, 0.0)


class Node:
    def __init__(
        self,
        config: ClusterConfig,
        index: int,
        key: KeyPair,
        env,
        store: ModelStore,
        executor: Optional[ModelExecutor] = None,
        behavior: Optional[Behavior] = None,
        cost: CostModel = ZERO_COST,
        eager: bool = True,
        discovery=None,
    ):
        if config.nodes[index].public_key != key.public_key:
            raise ValueError(f"key does not match node {index} in the cluster config")
        self.config = config
        self.index = index
        self.env = env
        self.cost = cost
        self.behavior = behavior or Behavior()
        self.engine = InferenceEngine(config, index, store, executor, eager=eager)
        self.coordinator = Coordinator(config, index, key, self.engine, env, self.behavior)
        self.proxy = Proxy(self, discovery)
        self.engine.on_work = self._kick
        self.coordinator.on_ordered = self.proxy.on_ordered
        self.coordinator.on_slot_update = self.proxy.on_slot_update
        self._busy = False
        self._flush = None
        self.executed_batches = 0
        self.executed_items = 0

    # -- execution with synthetic accelerator time ------------------------

    def _kick(self) -> None:
        if self._busy:
            return
        if not self.engine.eager:
            # agree/execute: run whatever ordering asked for as soon as this event finishes
            if self._flush is None and self.engine.pending():
                self._flush = self.env.schedule(0.0, self._flush_now)
            return
        batch = self.engine.next_batch()
        if batch is not None:
            self._run(batch)
        elif self.engine.pending() and self._flush is None:
            self._flush = self.env.schedule(self.cost.flush_delay, self._flush_now)

    def _flush_now(self) -> None:
        self._flush = None
        if self._busy:
            return
        batch = self.engine.next_batch(force=True)
        if batch is not None:
            self._run(batch)

    def _run(self, batch) -> None:
        self._busy = True
        if self._flush is not None:
            self._flush.cancel()
            self._flush = None

        def done():
            self.engine.execute_batch(batch)
            self.executed_batches += 1
            self.executed_items += len(batch.requests)
            self._busy = False
            self.coordinator.on_results_ready()
            self._kick()

        self.env.schedule(self.cost.cost(len(batch.requests)), done)

    # -- message entry point ----------------------------------------------

    def deliver(self, sender, payload) -> None:
        if isinstance(payload, Forward):
            self.on_forward(payload.op)
        elif not self.coordinator.receive(sender, payload):
            self.proxy.receive(sender, payload)

    def on_forward(self, op) -> None:
        if isinstance(op, RequestInf):
            if self.coordinator.ordered_location(op.key) is None:
                try:
                    self.engine.submit(op.request)
                except SubmitError as exc:
                    # still ordered, so every node reports the same rejection
                    log.debug("node %d: %s", self.index, exc)
        self.coordinator.add_op(op)
