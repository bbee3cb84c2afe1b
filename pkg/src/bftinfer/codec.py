"""Canonical binary encoding for every value that gets hashed, signed or sent.

Rules (fixed, big-endian throughout):

* ``int``   -> 8-byte unsigned
* ``float`` -> IEEE-754 binary64
* ``bool``  -> 1 byte, 0 or 1
* ``bytes`` / ``str`` -> 4-byte length, then the raw (utf-8) bytes
* ``list`` / variable ``tuple`` -> 4-byte count, then the items
* ``Optional[T]`` -> 1 tag byte (0 absent, 1 present), then T
* ``IntEnum`` -> 1 byte
* union of dataclasses -> 1 byte member index, then the member
* dataclass -> fields in declaration order, no framing

Decoding is strict: trailing bytes, out-of-range tags and non-canonical
bool/enum values are rejected, so that ``encode`` is injective and
``decode(encode(x)) == x``.
"""

from __future__ import annotations

import dataclasses
import enum
import struct
import types
import typing
from functools import lru_cache
from typing import Any, Callable

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")
_F64 = struct.Struct(">d")


class CodecError(ValueError):
    """Raised for values that cannot be encoded or bytes that do not decode."""


Encoder = Callable[[Any, bytearray], None]
Decoder = Callable[[memoryview, int], "tuple[Any, int]"]


def _enc_int(v, out):
    if isinstance(v, bool) or not isinstance(v, int):
        raise CodecError(f"expected int, got {type(v).__name__}")
    if v < 0 or v >= 1 << 64:
        raise CodecError(f"integer out of u64 range: {v}")
    out += _U64.pack(v)


def _dec_int(buf, pos):
    if pos + 8 > len(buf):
        raise CodecError("truncated u64")
    return _U64.unpack_from(buf, pos)[0], pos + 8


def _enc_float(v, out):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise CodecError(f"expected float, got {type(v).__name__}")
    out += _F64.pack(float(v))


def _dec_float(buf, pos):
    if pos + 8 > len(buf):
        raise CodecError("truncated f64")
    return _F64.unpack_from(buf, pos)[0], pos + 8


def _enc_bool(v, out):
    if not isinstance(v, bool):
        raise CodecError(f"expected bool, got {type(v).__name__}")
    out.append(1 if v else 0)


def _dec_bool(buf, pos):
    if pos >= len(buf):
        raise CodecError("truncated bool")
    b = buf[pos]
    if b > 1:
        raise CodecError(f"non-canonical bool byte {b}")
    return b == 1, pos + 1


def _enc_len(n, out):
    if n >= 1 << 32:
        raise CodecError("length exceeds u32")
    out += _U32.pack(n)


def _dec_len(buf, pos):
    if pos + 4 > len(buf):
        raise CodecError("truncated length prefix")
    return _U32.unpack_from(buf, pos)[0], pos + 4


def _enc_bytes(v, out):
    if not isinstance(v, (bytes, bytearray)):
        raise CodecError(f"expected bytes, got {type(v).__name__}")
    _enc_len(len(v), out)
    out += v


def _dec_bytes(buf, pos):
    n, pos = _dec_len(buf, pos)
    end = pos + n
    if end > len(buf):
        raise CodecError("truncated byte string")
    return bytes(buf[pos:end]), end


def _enc_str(v, out):
    if not isinstance(v, str):
        raise CodecError(f"expected str, got {type(v).__name__}")
    _enc_bytes(v.encode("utf-8"), out)


def _dec_str(buf, pos):
    raw, pos = _dec_bytes(buf, pos)
    try:
        return raw.decode("utf-8"), pos
    except UnicodeDecodeError as exc:
        raise CodecError("invalid utf-8") from exc


def _seq_codec(item_enc, item_dec, ctor):
    def enc(v, out):
        if not isinstance(v, (list, tuple)):
            raise CodecError(f"expected sequence, got {type(v).__name__}")
        _enc_len(len(v), out)
        for item in v:
            item_enc(item, out)

    def dec(buf, pos):
        n, pos = _dec_len(buf, pos)
        # every item takes at least one byte; reject absurd counts early
        if n > len(buf) - pos:
            raise CodecError("sequence count exceeds remaining bytes")
        items = []
        for _ in range(n):
            item, pos = item_dec(buf, pos)
            items.append(item)
        return ctor(items), pos

    return enc, dec


def _fixed_tuple_codec(codecs):
    def enc(v, out):
        if not isinstance(v, tuple) or len(v) != len(codecs):
            raise CodecError("fixed tuple arity mismatch")
        for (e, _), item in zip(codecs, v):
            e(item, out)

    def dec(buf, pos):
        items = []
        for _, d in codecs:
            item, pos = d(buf, pos)
            items.append(item)
        return tuple(items), pos

    return enc, dec


def _optional_codec(inner_enc, inner_dec):
    def enc(v, out):
        if v is None:
            out.append(0)
        else:
            out.append(1)
            inner_enc(v, out)

    def dec(buf, pos):
        if pos >= len(buf):
            raise CodecError("truncated optional tag")
        tag = buf[pos]
        if tag == 0:
            return None, pos + 1
        if tag != 1:
            raise CodecError(f"bad optional tag {tag}")
        return inner_dec(buf, pos + 1)

    return enc, dec


def _enum_codec(cls):
    members = {m.value: m for m in cls}
    if any(not 0 <= v < 256 for v in members):
        raise CodecError(f"{cls.__name__} values must fit one byte")

    def enc(v, out):
        if not isinstance(v, cls):
            raise CodecError(f"expected {cls.__name__}")
        out.append(v.value)

    def dec(buf, pos):
        if pos >= len(buf):
            raise CodecError("truncated enum")
        try:
            return members[buf[pos]], pos + 1
        except KeyError:
            raise CodecError(f"bad {cls.__name__} tag {buf[pos]}") from None

    return enc, dec


def _union_codec(members):
    codecs = [_codec_for(m) for m in members]

    def enc(v, out):
        for tag, m in enumerate(members):
            if type(v) is m:
                out.append(tag)
                codecs[tag][0](v, out)
                return
        raise CodecError(f"{type(v).__name__} is not a member of the union")

    def dec(buf, pos):
        if pos >= len(buf):
            raise CodecError("truncated union tag")
        tag = buf[pos]
        if tag >= len(members):
            raise CodecError(f"bad union tag {tag}")
        return codecs[tag][1](buf, pos + 1)

    return enc, dec


def _dataclass_codec(cls):
    hints = typing.get_type_hints(cls)
    fields = [f for f in dataclasses.fields(cls) if f.init]
    # resolved lazily so self-referential / forward-declared types work
    resolved: list = []

    def codecs():
        if not resolved:
            resolved.extend((f.name, _codec_for(hints[f.name])) for f in fields)
        return resolved

    def enc(v, out):
        if type(v) is not cls:
            raise CodecError(f"expected {cls.__name__}, got {type(v).__name__}")
        for name, (e, _) in codecs():
            try:
                e(getattr(v, name), out)
            except CodecError as exc:
                raise CodecError(f"{cls.__name__}.{name}: {exc}") from None

    def dec(buf, pos):
        kwargs = {}
        for name, (_, d) in codecs():
            kwargs[name], pos = d(buf, pos)
        try:
            return cls(**kwargs), pos
        except (TypeError, ValueError) as exc:
            raise CodecError(f"{cls.__name__}: {exc}") from None

    return enc, dec


@lru_cache(maxsize=None)
def _codec_for(tp) -> tuple[Encoder, Decoder]:
    if tp is int:
        return _enc_int, _dec_int
    if tp is float:
        return _enc_float, _dec_float
    if tp is bool:
        return _enc_bool, _dec_bool
    if tp is bytes:
        return _enc_bytes, _dec_bytes
    if tp is str:
        return _enc_str, _dec_str
    if isinstance(tp, type) and issubclass(tp, enum.IntEnum):
        return _enum_codec(tp)
    if dataclasses.is_dataclass(tp) and isinstance(tp, type):
        return _dataclass_codec(tp)

    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        if len(non_none) < len(args):
            inner = non_none[0] if len(non_none) == 1 else typing.Union[tuple(non_none)]
            return _optional_codec(*_codec_for(inner))
        return _union_codec(tuple(args))
    if origin is list:
        return _seq_codec(*_codec_for(args[0]), list)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return _seq_codec(*_codec_for(args[0]), tuple)
        return _fixed_tuple_codec([_codec_for(a) for a in args])
    raise CodecError(f"no canonical encoding for {tp!r}")


def encode(value: Any, tp: Any = None) -> bytes:
    """Canonically encode ``value``. ``tp`` defaults to ``type(value)``."""
    out = bytearray()
    _codec_for(tp if tp is not None else type(value))[0](value, out)
    return bytes(out)


def decode(data: bytes, tp: Any) -> Any:
    """Decode ``data`` as a value of type ``tp``; the whole buffer must be used."""
    buf = memoryview(data)
    value, pos = _codec_for(tp)[1](buf, 0)
    if pos != len(buf):
        raise CodecError(f"{len(buf) - pos} trailing bytes")
    return value
