"""Canonical binary encoding for everything that gets hashed or signed.

Layout rules: fields concatenated in declared order, every integer is an
unsigned 8-byte big-endian word, every variable-length field is prefixed
with its byte length as such a word. Two encoders of the same value must
produce identical bytes, so sets are always emitted in sorted order.
"""
from __future__ import annotations

import hashlib
from typing import Iterable

U64_MAX = 2**64 - 1

# Sentinel stored in place of an absent expiry ("never expires").
NEVER = U64_MAX


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def u64(value: int) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"value out of u64 range: {value}")
    return value.to_bytes(8, "big")


def read_u64(data: bytes, offset: int) -> tuple[int, int]:
    if offset + 8 > len(data):
        raise ValueError("truncated u64")
    return int.from_bytes(data[offset:offset + 8], "big"), offset + 8


def blob(data: bytes) -> bytes:
    return u64(len(data)) + data


def read_blob(data: bytes, offset: int) -> tuple[bytes, int]:
    length, offset = read_u64(data, offset)
    if offset + length > len(data):
        raise ValueError("truncated blob")
    return data[offset:offset + length], offset + length


def text(value: str) -> bytes:
    return blob(value.encode("utf-8"))


def read_text(data: bytes, offset: int) -> tuple[str, int]:
    raw, offset = read_blob(data, offset)
    return raw.decode("utf-8"), offset


def seq(items: Iterable[bytes]) -> bytes:
    items = list(items)
    return u64(len(items)) + b"".join(items)


# Self-describing value encoding, used for claim parameters where the
# value type varies by claim kind. One tag byte, then the payload.

def value(v) -> bytes:
    if isinstance(v, bool):
        raise TypeError("encode booleans as 0/1 integers")
    if isinstance(v, int):
        return b"i" + u64(v)
    if isinstance(v, str):
        return b"s" + text(v)
    if isinstance(v, bytes):
        return b"b" + blob(v)
    if isinstance(v, (list, tuple)):
        return b"l" + seq(value(item) for item in v)
    raise TypeError(f"unencodable value type: {type(v).__name__}")


def read_value(data: bytes, offset: int):
    if offset >= len(data):
        raise ValueError("truncated value")
    tag = data[offset:offset + 1]
    offset += 1
    if tag == b"i":
        return read_u64(data, offset)
    if tag == b"s":
        return read_text(data, offset)
    if tag == b"b":
        return read_blob(data, offset)
    if tag == b"l":
        count, offset = read_u64(data, offset)
        items = []
        for _ in range(count):
            item, offset = read_value(data, offset)
            items.append(item)
        return tuple(items), offset
    raise ValueError(f"unknown value tag: {tag!r}")


def kv_map(pairs: Iterable[tuple[str, object]]) -> bytes:
    """Encode string-keyed parameters, sorted by key for canonical order."""
    ordered = sorted(pairs, key=lambda kv: kv[0])
    return seq(text(k) + value(v) for k, v in ordered)


def read_kv_map(data: bytes, offset: int) -> tuple[tuple[tuple[str, object], ...], int]:
    count, offset = read_u64(data, offset)
    pairs = []
    for _ in range(count):
        key, offset = read_text(data, offset)
        val, offset = read_value(data, offset)
        pairs.append((key, val))
    return tuple(pairs), offset
