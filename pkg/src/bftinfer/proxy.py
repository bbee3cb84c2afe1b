"""Inference proxy: the untrusted API endpoint running next to each node.

It fans client and owner ops out to every coordinator, waits for ordering,
assembles certificates from what its own coordinator collected, and answers
listing and upload calls. Nothing it returns needs to be trusted: clients
verify certificates against the node keys.
"""

from __future__ import annotations

import logging

from . import certificate
from .crypto import digest
from .domain import RequestInf
from .messages import (
    Discovery,
    ErrorReply,
    Forward,
    GetEndpoints,
    GetModelGroups,
    InferResponse,
    ModelGroups,
    OpAck,
    Outcome,
    RetireModel,
    SubmitInf,
    SubmitOwnerOp,
    UploadAck,
    UploadModel,
)
from .distance import DistanceDescriptor

log = logging.getLogger(__name__)


class Proxy:
    def __init__(self, node, discovery: Discovery | None = None):
        self.node = node
        self.config = node.config
        self.discovery = discovery
        self.sessions: dict[bytes, list] = {}  # op key -> [(client, op)]
        self.waiting: dict[int, set] = {}  # seq -> op keys whose certificate is not ready
        self.responses = 0

    @property
    def coordinator(self):
        return self.node.coordinator

    def receive(self, sender, payload) -> None:
        if isinstance(payload, SubmitInf):
            self.submit(sender, RequestInf(payload.request))
        elif isinstance(payload, SubmitOwnerOp):
            self.submit(sender, payload.op)
        elif isinstance(payload, GetModelGroups):
            self.node.env.send(sender, ModelGroups(tuple(self.coordinator.registry.all_groups())))
        elif isinstance(payload, GetEndpoints):
            if self.discovery is None:
                self.node.env.send(sender, ErrorReply("no discovery record"))
            else:
                self.node.env.send(sender, self.discovery)
        elif isinstance(payload, UploadModel):
            self.node.env.send(sender, self._upload(payload))
        elif isinstance(payload, RetireModel):
            self.node.engine.store.files.pop(payload.model_url, None)
            self.node.env.send(sender, UploadAck(payload.model_url, True))

    def _upload(self, msg: UploadModel) -> UploadAck:
        try:
            data = self.node.engine.store.fetch(msg.model_url)
        except Exception as exc:
            return UploadAck(msg.model_url, False, detail=str(exc))
        self.node.engine.store.put(msg.model_url, data)
        return UploadAck(msg.model_url, True, digest(data))

    # -- ops --------------------------------------------------------------

    def submit(self, client, op) -> None:
        if not self.node.behavior.forwards_client_requests():
            return
        key = op.key
        self.sessions.setdefault(key, []).append((client, op))
        loc = self.coordinator.ordered_location(key)
        if loc is not None:
            record = self.coordinator.log.get(loc[1])
            if record is not None:
                self._answer(record, key)
                return
        env = self.node.env
        for dest in range(self.config.n):
            if dest == self.node.index:
                continue
            env.send(dest, Forward(op))
        self.node.on_forward(op)

    def on_ordered(self, record) -> None:
        for e in record.entries:
            key = e.op.key
            if key not in self.sessions:
                continue
            target = record
            if e.outcome == Outcome.DUPLICATE:
                loc = self.coordinator.ordered_location(key)
                target = self.coordinator.log.get(loc[1]) if loc else None
                if target is None:
                    continue
            self._answer(target, key)

    def on_slot_update(self, slot) -> None:
        keys = self.waiting.get(slot.seq)
        if not keys:
            return
        record = self.coordinator.log.get(slot.seq)
        if record is None or record.slot is not slot:
            return
        for key in sorted(keys):
            self._answer(record, key)

    def _answer(self, record, key: bytes) -> None:
        clients = self.sessions.get(key)
        if not clients:
            return
        entry = next((e for e in record.entries if e.op.key == key and e.outcome != Outcome.DUPLICATE), None)
        if entry is None:
            return
        op = clients[0][1]
        if isinstance(op, RequestInf):
            response = self._inference_response(record, entry)
            if response is None:
                self.waiting.setdefault(record.seq, set()).add(key)
                return
        else:
            response = OpAck(key, entry.outcome, record.view, record.seq, entry.detail)
        self.waiting.get(record.seq, set()).discard(key)
        del self.sessions[key]
        env = self.node.env
        for client, _ in clients:
            env.send(client, response)
            self.responses += 1
        env.trace("respond", seq=record.seq, outcome=int(response.outcome))

    def _inference_response(self, record, entry):
        slot = record.slot
        if slot is None:
            return None
        req = entry.request
        built = certificate.assemble(slot, req, self.config.n, self.config.f)
        if built is None:
            return None
        outcome, results, cert = built
        dist = None
        if entry.group is not None:
            dist = DistanceDescriptor(entry.group.distance.metric, entry.epsilon)
        return InferResponse(req.request_id, outcome, results, cert, dist, entry.version)
