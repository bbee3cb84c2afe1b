import math
import os
import random
from dataclasses import dataclass
from typing import Optional

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftinfer import codec
from bftinfer.crypto import KeyPair, digest, sign_value, verify, verify_value
from bftinfer.distance import Metric
from bftinfer.domain import InferenceRequest, InferenceResult, make_request

import oracles


@dataclass(frozen=True)
class Sample:
    n: int
    x: float
    flag: bool
    blob: bytes
    name: str
    xs: tuple[float, ...]
    maybe: Optional[float]
    metric: Metric


samples = st.builds(
    Sample,
    n=st.integers(0, 2**64 - 1),
    x=st.floats(allow_nan=False),
    flag=st.booleans(),
    blob=st.binary(max_size=40),
    name=st.text(max_size=12),
    xs=st.lists(st.floats(allow_nan=False), max_size=6).map(tuple),
    maybe=st.none() | st.floats(allow_nan=False),
    metric=st.sampled_from(list(Metric)),
)


def test_encoding_rules_by_hand():
    s = Sample(7, 1.5, True, b"ab", "hi", (0.25, -2.0), None, Metric.CHEBYSHEV)
    expected = (oracles.enc_u64(7) + oracles.enc_f64(1.5) + b"\x01" + oracles.enc_bytes(b"ab")
                + oracles.enc_str("hi") + oracles.enc_floats([0.25, -2.0]) + b"\x00"
                + bytes([int(Metric.CHEBYSHEV)]))
    assert codec.encode(s) == expected


def test_request_encoding_matches_field_order():
    key = KeyPair.from_seed(b"enc")
    req = make_request(key, b"n1", "g", [1.0, 2.0], epsilon=0.5)
    expected = (oracles.enc_bytes(req.request_id) + oracles.enc_str("g") + oracles.enc_floats([1.0, 2.0])
                + oracles.enc_bytes(key.public_key) + oracles.enc_bytes(b"n1")
                + b"\x01" + oracles.enc_f64(0.5) + oracles.enc_bytes(req.client_sig))
    assert codec.encode(req) == expected


@settings(max_examples=300, deadline=None)
@given(samples)
def test_round_trip(s):
    assert codec.decode(codec.encode(s), Sample) == s


@settings(max_examples=300, deadline=None)
@given(samples, samples)
def test_injective(a, b):
    if a != b:
        assert codec.encode(a) != codec.encode(b)


def test_negative_zero_and_zero_differ():
    assert codec.encode(0.0) != codec.encode(-0.0)


@pytest.mark.parametrize("bad", [
    b"",
    codec.encode(3) + b"\x00",  # trailing byte
    b"\x02",  # bool must be 0 or 1
])
def test_strict_decoding(bad):
    tp = bool if bad == b"\x02" else int
    with pytest.raises(codec.CodecError):
        codec.decode(bad, tp)


def test_truncated_inputs_raise():
    data = codec.encode(Sample(1, 2.0, False, b"xyz", "q", (1.0,), 3.0, Metric.EUCLIDEAN))
    for cut in range(len(data)):
        with pytest.raises(codec.CodecError):
            codec.decode(data[:cut], Sample)


def test_negative_int_refused():
    with pytest.raises(codec.CodecError):
        codec.encode(-1)


def test_result_round_trip():
    r = InferenceResult(os.urandom(32), 2, "g", 3, (0.1, math.pi), os.urandom(32))
    assert codec.decode(codec.encode(r), InferenceResult) == r


def test_hash_is_fixed_width_and_deterministic():
    assert len(digest(b"")) == 32
    assert digest(b"abc") == digest(b"abc")
    assert digest(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_hash_collision_sweep():
    rng = random.Random(1)
    inputs = {rng.randbytes(rng.randrange(1, 24)) for _ in range(10_000)}
    assert len({digest(x) for x in inputs}) == len(inputs)


def test_sign_verify():
    a, b = KeyPair.from_seed(b"a"), KeyPair.from_seed(b"b")
    sig = a.sign(b"")
    assert verify(a.public_key, b"", sig)
    assert not verify(b.public_key, b"", sig)


def test_bit_flips_rejected():
    rng = random.Random(2)
    key = KeyPair.from_seed(b"flip")
    accepted = 0
    for _ in range(1000):
        msg = rng.randbytes(rng.randrange(1, 64))
        sig = key.sign(msg)
        target = rng.choice(("msg", "sig"))
        if target == "msg":
            i = rng.randrange(len(msg) * 8)
            bad = bytearray(msg)
            bad[i // 8] ^= 1 << (i % 8)
            accepted += verify(key.public_key, bytes(bad), sig)
        else:
            i = rng.randrange(len(sig) * 8)
            bad = bytearray(sig)
            bad[i // 8] ^= 1 << (i % 8)
            accepted += verify(key.public_key, msg, bytes(bad))
    assert accepted == 0


@pytest.mark.parametrize("pub,sig", [(b"short", b"x" * 64), (b"k" * 32, b"short"), (b"\xff" * 32, b"\x00" * 64)])
def test_malformed_inputs_are_false(pub, sig):
    assert verify(pub, b"m", sig) is False


def test_value_signatures_cover_the_encoding():
    key = KeyPair.from_seed(b"v")
    req = make_request(key, b"n", "g", [1.0])
    assert req.signature_valid()
    assert verify_value(key.public_key, req.unsigned(), req.client_sig)
    assert not verify_value(key.public_key, req.unsigned().__class__(**{**req.unsigned().__dict__, "group_id": "h"}),
                            req.client_sig)


def test_key_bytes_round_trip():
    key = KeyPair.generate()
    again = KeyPair.from_private_bytes(key.private_bytes())
    assert again.public_key == key.public_key
    assert verify(key.public_key, b"m", again.sign(b"m"))


def test_sign_value_matches_digest_rule():
    key = KeyPair.from_seed(b"rule")
    req = make_request(key, b"z", "g", [0.0]).unsigned()
    assert verify(key.public_key, digest(codec.encode(req)), sign_value(key, req))


def test_request_type_decodes_from_wire():
    key = KeyPair.from_seed(b"wire")
    req = make_request(key, b"w", "g", [4.0, 5.0])
    assert codec.decode(codec.encode(req), InferenceRequest) == req
