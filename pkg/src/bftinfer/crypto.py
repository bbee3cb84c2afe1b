"""Hashing and signatures.

SHA-256 and Ed25519 are fixed at build time. Every protocol signature in the
package is taken over ``digest(canonical encoding)`` of the unsigned message,
see :func:`sign_value`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import codec

HASH_LEN = 32
SIG_LEN = 64
PUBKEY_LEN = 32


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    _private: Ed25519PrivateKey = field(repr=False, compare=False)

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls.from_private(Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        """Deterministic key from arbitrary seed bytes (tests and simulation)."""
        return cls.from_private(Ed25519PrivateKey.from_private_bytes(digest(seed)))

    @classmethod
    def from_private(cls, key: Ed25519PrivateKey) -> "KeyPair":
        pub = key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(pub, key)

    def private_bytes(self) -> bytes:
        return self._private.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    @classmethod
    def from_private_bytes(cls, raw: bytes) -> "KeyPair":
        return cls.from_private(Ed25519PrivateKey.from_private_bytes(raw))

    def sign(self, msg: bytes) -> bytes:
        return self._private.sign(msg)


def sign(key: KeyPair, msg: bytes) -> bytes:
    return key.sign(msg)


@lru_cache(maxsize=1 << 16)
def _verify_cached(pub: bytes, msg: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(sig, msg)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def verify(pub: bytes, msg: bytes, sig: bytes) -> bool:
    """Total: malformed keys or signatures give ``False``, never an exception."""
    if not isinstance(pub, bytes) or not isinstance(msg, bytes) or not isinstance(sig, bytes):
        return False
    if len(pub) != PUBKEY_LEN or len(sig) != SIG_LEN:
        return False
    # verification is a pure function of its arguments, so memoizing is safe
    return _verify_cached(pub, msg, sig)


def value_digest(value, tp=None) -> bytes:
    return digest(codec.encode(value, tp))


def sign_value(key: KeyPair, value, tp=None) -> bytes:
    return key.sign(value_digest(value, tp))


def verify_value(pub: bytes, value, sig: bytes, tp=None) -> bool:
    try:
        msg = value_digest(value, tp)
    except codec.CodecError:
        return False
    return verify(pub, msg, sig)
