"""Client SDK: discovery, request submission with failover, and certificate checks.

The SDK is sans-IO like the node: it runs over an ``env`` with ``send``,
``schedule`` and ``now``, so the simulator and the socket transport drive the
same code.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from .certificate import verify_cert, verify_failure_cert
from .crypto import KeyPair
from .domain import InferenceRequest, RequestInf, make_request, sign_owner_op
from .messages import (
    Discovery,
    InferResponse,
    OpAck,
    Outcome,
    SubmitInf,
    SubmitOwnerOp,
    msg_sig_valid,
    sign_msg,
)

log = logging.getLogger(__name__)


class DiscoveryError(ValueError):
    pass


def make_discovery(key: KeyPair, endpoints, f: int) -> Discovery:
    return sign_msg(key, Discovery(tuple(endpoints), f, key.public_key))


def check_discovery(record: Discovery, discovery_key: bytes) -> Discovery:
    """Return ``record`` if it is signed by ``discovery_key`` and self-consistent."""
    if not isinstance(record, Discovery) or record.discovery_key != discovery_key:
        raise DiscoveryError("discovery record is not from the trusted discovery key")
    if not msg_sig_valid(record, discovery_key):
        raise DiscoveryError("discovery record signature does not verify")
    keys = [e.public_key for e in record.endpoints]
    if any(a >= b for a, b in zip(keys, keys[1:])) or len(keys) < 3 * record.f + 1:
        raise DiscoveryError("discovery record lists an invalid node set")
    return record


@dataclass
class Pending:
    op: object
    on_done: Optional[Callable] = None
    tried: list = field(default_factory=list)
    response: object = None
    verified: bool = False
    done: bool = False
    started: float = 0.0
    finished: float = 0.0
    timer: object = None
    first_proxy: int = 0

    @property
    def request(self) -> Optional[InferenceRequest]:
        return self.op.request if isinstance(self.op, RequestInf) else None

    @property
    def certified(self) -> bool:
        return self.done and self.verified


class Client:
    """Submits ops through proxies and keeps only answers that verify.

    ``proxies`` are transport addresses in node order; ``keys`` are the
    node public keys in the same order. A request goes to one proxy; on a
    timeout or an answer that fails verification it moves to the next, for
    at most ``f + 1`` proxies, so at least one is run by an honest node.
    """

    def __init__(self, key: KeyPair, keys, f: int, proxies, env, timeout: float = 5.0, first_proxy: int = 0):
        self.key = key
        self.keys = list(keys)
        self.f = f
        self.proxies = list(proxies)
        self.env = env
        self.timeout = timeout
        self.first_proxy = first_proxy
        self.pending: dict[bytes, Pending] = {}
        self.finished: list[Pending] = []
        self._nonce = itertools.count()

    @classmethod
    def from_discovery(cls, key: KeyPair, record: Discovery, discovery_key: bytes, env, **kw) -> "Client":
        check_discovery(record, discovery_key)
        return cls(
            key,
            [e.public_key for e in record.endpoints],
            record.f,
            [e.api_url for e in record.endpoints],
            env,
            **kw,
        )

    def next_nonce(self) -> bytes:
        return b"n%d" % next(self._nonce)

    # -- submission -------------------------------------------------------

    def infer(self, group_id: str, values, epsilon=None, on_done=None, nonce: bytes = b"", first_proxy=None) -> Pending:
        req = make_request(self.key, nonce or self.next_nonce(), group_id, values, epsilon)
        return self.submit(RequestInf(req), on_done, first_proxy)

    def owner_op(self, op, on_done=None, first_proxy=None) -> Pending:
        return self.submit(sign_owner_op(self.key, op), on_done, first_proxy)

    def submit(self, op, on_done=None, first_proxy=None) -> Pending:
        key = op.key
        if key in self.pending:
            raise ValueError("an identical op is already outstanding")
        first = self.first_proxy if first_proxy is None else first_proxy
        p = Pending(op, on_done, started=self.env.now(), first_proxy=first)
        self.pending[key] = p
        self._try_next(key)
        return p

    def _try_next(self, key: bytes) -> None:
        p = self.pending.get(key)
        if p is None:
            return
        if len(p.tried) >= min(self.f + 1, len(self.proxies)):
            self._finish(key, p, verified=False)
            return
        idx = (p.first_proxy + len(p.tried)) % len(self.proxies)
        p.tried.append(idx)
        dest = self.proxies[idx]
        if isinstance(p.op, RequestInf):
            self.env.send(dest, SubmitInf(p.op.request))
        else:
            self.env.send(dest, SubmitOwnerOp(p.op))
        attempt = len(p.tried)
        p.timer = self.env.schedule(self.timeout, lambda: self._timeout(key, attempt))

    def _timeout(self, key: bytes, attempt: int) -> None:
        p = self.pending.get(key)
        if p is not None and len(p.tried) == attempt:
            self._try_next(key)

    def _finish(self, key: bytes, p: Pending, verified: bool) -> None:
        if p.timer is not None:
            p.timer.cancel()
        p.verified = verified
        p.done = True
        p.finished = self.env.now()
        del self.pending[key]
        self.finished.append(p)
        if p.on_done is not None:
            p.on_done(p)

    # -- responses --------------------------------------------------------

    def receive(self, sender, payload) -> None:
        if isinstance(payload, InferResponse):
            self._on_infer(payload)
        elif isinstance(payload, OpAck):
            p = self.pending.get(payload.op_key)
            if p is not None:
                # owner acknowledgements carry no certificate; they are advisory
                p.response = payload
                self._finish(payload.op_key, p, verified=payload.outcome == Outcome.OK)

    def _on_infer(self, resp: InferResponse) -> None:
        for key, p in list(self.pending.items()):
            req = p.request
            if req is None or req.request_id != resp.request_id:
                continue
            if self.check(req, resp):
                p.response = resp
                self._finish(key, p, verified=True)
            else:
                log.info("discarding an answer that does not verify; trying the next proxy")
                if p.timer is not None:
                    p.timer.cancel()
                self._try_next(key)
            return

    def check(self, req: InferenceRequest, resp: InferResponse) -> bool:
        if resp.certificate is None or resp.request_id != req.request_id:
            return False
        if resp.outcome == Outcome.OK:
            if any(r.group_version != resp.group_version for r in resp.results):
                return False
            return verify_cert(req, resp.results, resp.certificate, self.keys, self.f)
        if resp.results:
            return False
        return resp.certificate.outcome == resp.outcome and verify_failure_cert(
            req, resp.certificate, self.keys, self.f
        )
