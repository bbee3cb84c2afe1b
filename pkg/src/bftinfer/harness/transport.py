"""Socket transport for live clusters.

Frames are a 4-byte big-endian length followed by the body. A connection
opens with a handshake in the clear:

1. each side sends a ``Hello`` frame with its Ed25519 identity key, a fresh
   X25519 key and a random nonce;
2. each side sends an ``Auth`` frame signing the transcript hash of both
   hellos, so each peer proves it holds the identity key it claimed.

Both directions then derive separate ChaCha20-Poly1305 keys from the X25519
secret and the transcript, and every later frame is sealed with a per
direction counter as nonce. A replayed, reordered or altered frame fails to
open and the connection is dropped.

``LiveEnv`` gives a node or client the same ``send``/``schedule``/``now``/
``trace`` interface the simulator provides. Incoming messages go onto one
queue that a single task drains, so protocol code never runs concurrently
with itself.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Callable, Optional
from urllib.parse import urlparse

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .. import codec
from ..crypto import KeyPair, digest, verify
from ..messages import decode_payload, encode_payload
from .simnet import _plain

log = logging.getLogger(__name__)

MAX_FRAME = 16 << 20
_HS_LABEL = b"bftinfer/handshake/v1"


class HandshakeError(ConnectionError):
    pass


@dataclass(frozen=True)
class Hello:
    identity: bytes
    ephemeral: bytes
    nonce: bytes


@dataclass(frozen=True)
class Auth:
    signature: bytes


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    """``tcp://host:port`` or ``host:port``."""
    parsed = urlparse(endpoint if "://" in endpoint else f"tcp://{endpoint}")
    if parsed.scheme != "tcp" or not parsed.hostname or not parsed.port:
        raise ValueError(f"not a tcp endpoint: {endpoint!r}")
    return parsed.hostname, parsed.port


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    header = await reader.readexactly(4)
    (size,) = struct.unpack(">I", header)
    if size > MAX_FRAME:
        raise ConnectionError(f"frame of {size} bytes exceeds limit")
    return await reader.readexactly(size)


def write_frame(writer: asyncio.StreamWriter, body: bytes) -> None:
    if len(body) > MAX_FRAME:
        raise ValueError("frame too large")
    writer.write(struct.pack(">I", len(body)) + body)


class Channel:
    """An authenticated, sealed connection to one peer."""

    def __init__(self, reader, writer, peer: bytes, send_key: bytes, recv_key: bytes):
        self.reader = reader
        self.writer = writer
        self.peer = peer
        self._seal = ChaCha20Poly1305(send_key)
        self._open = ChaCha20Poly1305(recv_key)
        self._sent = 0
        self._received = 0

    async def send(self, data: bytes) -> None:
        nonce = self._sent.to_bytes(12, "big")
        self._sent += 1
        write_frame(self.writer, self._seal.encrypt(nonce, data, None))
        await self.writer.drain()

    async def recv(self) -> bytes:
        body = await read_frame(self.reader)
        nonce = self._received.to_bytes(12, "big")
        self._received += 1
        return self._open.decrypt(nonce, body, None)

    def close(self) -> None:
        self.writer.close()


def _raw(pub: X25519PublicKey) -> bytes:
    return pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


async def handshake(reader, writer, key: KeyPair, initiator: bool,
                    accept: Optional[Callable[[bytes], bool]] = None, timeout: float = 10.0) -> Channel:
    """Run the mutual handshake; ``accept`` vets the peer's identity key."""
    eph = X25519PrivateKey.generate()
    mine = Hello(key.public_key, _raw(eph.public_key()), os.urandom(16))
    write_frame(writer, codec.encode(mine))
    await writer.drain()
    try:
        theirs = codec.decode(await asyncio.wait_for(read_frame(reader), timeout), Hello)
    except (codec.CodecError, ValueError) as exc:
        raise HandshakeError(f"bad hello: {exc}") from exc
    if len(theirs.identity) != 32 or len(theirs.ephemeral) != 32:
        raise HandshakeError("bad hello sizes")
    if accept is not None and not accept(theirs.identity):
        raise HandshakeError("peer identity not accepted")
    first, second = (mine, theirs) if initiator else (theirs, mine)
    transcript = digest(_HS_LABEL + codec.encode(first) + codec.encode(second))
    write_frame(writer, codec.encode(Auth(key.sign(transcript + b"/" + mine.identity))))
    await writer.drain()
    try:
        auth = codec.decode(await asyncio.wait_for(read_frame(reader), timeout), Auth)
    except (codec.CodecError, ValueError) as exc:
        raise HandshakeError(f"bad auth: {exc}") from exc
    if not verify(theirs.identity, transcript + b"/" + theirs.identity, auth.signature):
        raise HandshakeError("peer failed to prove its identity key")
    shared = eph.exchange(X25519PublicKey.from_public_bytes(theirs.ephemeral))
    okm = HKDF(hashes.SHA256(), 64, transcript, _HS_LABEL).derive(shared)
    k_init, k_resp = okm[:32], okm[32:]
    send_key, recv_key = (k_init, k_resp) if initiator else (k_resp, k_init)
    return Channel(reader, writer, theirs.identity, send_key, recv_key)


class LiveEnv:
    """Wall-clock env over sockets.

    Destinations are node indexes (looked up in ``peers``) or the identity
    key of a connected client. Replies to a client go back over the
    connection it opened.
    """

    def __init__(self, key: KeyPair, peers: dict, accept: Optional[Callable[[bytes], bool]] = None,
                 trace_file: Optional[str] = None):
        self.key = key
        self.peers = dict(peers)  # index -> (public_key, endpoint)
        self.by_key = {pub: idx for idx, (pub, _ep) in self.peers.items()}
        self.accept = accept
        self.handler: Optional[Callable] = None
        self.queue: asyncio.Queue = asyncio.Queue()
        self.channels: dict[bytes, Channel] = {}
        self._dialing: dict[bytes, asyncio.Task] = {}
        self._outbox: dict[bytes, list[bytes]] = {}
        self._tasks: set = set()
        self._server = None
        self.dial_attempts = 4
        self._trace = open(trace_file, "a") if trace_file else None
        self.loop = asyncio.get_event_loop()

    # -- env interface ----------------------------------------------------

    def now(self) -> float:
        return self.loop.time()

    def schedule(self, delay: float, fn):
        return self.loop.call_later(max(0.0, delay), fn)

    def trace(self, kind: str, **fields) -> None:
        if self._trace is None:
            return
        line = json.dumps({"t": round(self.now(), 6), "kind": kind, **_plain(fields)}, sort_keys=True)
        self._trace.write(line + "\n")
        self._trace.flush()

    def send(self, dest, payload) -> None:
        pub = self.peers[dest][0] if dest in self.peers else dest
        if not isinstance(pub, bytes):
            log.warning("no route to %r", dest)
            return
        data = encode_payload(payload)
        if pub == self.key.public_key:
            # loopback still goes through the codec, like every other hop
            self.queue.put_nowait((self.by_key.get(pub, pub), decode_payload(data)))
            return
        ch = self.channels.get(pub)
        if ch is not None:
            self._spawn(self._send_on(ch, data))
            return
        self._outbox.setdefault(pub, []).append(data)
        idx = self.by_key.get(pub)
        if idx is not None and pub not in self._dialing:
            self._dialing[pub] = self._spawn(self._dial(idx))

    # -- connections ------------------------------------------------------

    def _spawn(self, coro) -> asyncio.Task:
        task = self.loop.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _send_on(self, ch: Channel, data: bytes) -> None:
        try:
            await ch.send(data)
        except (ConnectionError, OSError) as exc:
            log.debug("send to %s failed: %s", ch.peer.hex()[:8], exc)
            self._drop(ch)

    async def _dial(self, idx) -> None:
        pub, endpoint = self.peers[idx]
        host, port = parse_endpoint(endpoint)
        for attempt in range(self.dial_attempts):
            try:
                reader, writer = await asyncio.open_connection(host, port)
                ch = await handshake(reader, writer, self.key, True, accept=lambda k: k == pub)
                break
            except (OSError, ConnectionError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
                log.debug("dial %s failed: %s", endpoint, exc)
                await asyncio.sleep(0.1 * 2 ** attempt)
        else:
            self._dialing.pop(pub, None)
            self._outbox.pop(pub, None)  # protocol timers retry; stale frames are not worth keeping
            return
        self._dialing.pop(pub, None)
        self._attach(ch)

    def _attach(self, ch: Channel) -> None:
        old = self.channels.get(ch.peer)
        self.channels[ch.peer] = ch
        if old is not None and old is not ch:
            old.close()
        for data in self._outbox.pop(ch.peer, []):
            self._spawn(self._send_on(ch, data))
        self._spawn(self._read(ch))

    def _drop(self, ch: Channel) -> None:
        if self.channels.get(ch.peer) is ch:
            del self.channels[ch.peer]
        ch.close()

    async def _read(self, ch: Channel) -> None:
        sender = self.by_key.get(ch.peer, ch.peer)
        try:
            while True:
                data = await ch.recv()
                try:
                    payload = decode_payload(data)
                except (codec.CodecError, ValueError) as exc:
                    log.warning("undecodable frame from %r: %s", sender, exc)
                    continue
                await self.queue.put((sender, payload))
        except (ConnectionError, OSError, asyncio.IncompleteReadError, asyncio.CancelledError):
            pass
        except Exception as exc:  # a forged frame fails AEAD with InvalidTag
            log.warning("dropping connection from %r: %s", sender, exc)
        finally:
            self._drop(ch)

    async def _on_connect(self, reader, writer) -> None:
        try:
            ch = await handshake(reader, writer, self.key, False, accept=self.accept)
        except (OSError, ConnectionError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
            log.debug("inbound handshake failed: %s", exc)
            writer.close()
            return
        self._attach(ch)

    async def listen(self, endpoint: str):
        host, port = parse_endpoint(endpoint)
        self._server = await asyncio.start_server(self._on_connect, host, port)
        return self._server

    async def pump(self) -> None:
        """Hand queued messages to the handler one at a time."""
        while True:
            sender, payload = await self.queue.get()
            try:
                self.handler(sender, payload)
            except Exception:
                log.exception("handler failed on %s from %r", type(payload).__name__, sender)

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for ch in list(self.channels.values()):
            ch.close()
        for task in list(self._tasks):
            task.cancel()
        if self._trace is not None:
            self._trace.close()
