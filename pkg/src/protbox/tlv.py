"""Deterministic TLV encoding: tag u16-BE, length u32-BE, value bytes.

Used for the registry body and the key-distribution wire messages. Field
order is fixed by the writer; readers iterate in order.
"""

from __future__ import annotations

import struct

_HEADER = struct.Struct(">HI")


def encode(tag: int, value: bytes) -> bytes:
    return _HEADER.pack(tag, len(value)) + value


def encode_u8(tag: int, value: int) -> bytes:
    return encode(tag, bytes([value]))


def encode_u32(tag: int, value: int) -> bytes:
    return encode(tag, struct.pack(">I", value))


def encode_u64(tag: int, value: int) -> bytes:
    return encode(tag, struct.pack(">Q", value))


def encode_str(tag: int, value: str) -> bytes:
    return encode(tag, value.encode("utf-8"))


def decode_u32(value: bytes) -> int:
    (n,) = struct.unpack(">I", value)
    return n


def decode_u64(value: bytes) -> int:
    (n,) = struct.unpack(">Q", value)
    return n


class TlvError(ValueError):
    pass


def iter_tlv(data: bytes):
    """Yield (tag, value) pairs; raises TlvError on truncation."""
    off = 0
    while off < len(data):
        if off + 6 > len(data):
            raise TlvError("truncated TLV header")
        tag, length = _HEADER.unpack_from(data, off)
        off += 6
        if off + length > len(data):
            raise TlvError("truncated TLV value")
        yield tag, data[off : off + length]
        off += length


def parse_map(data: bytes) -> dict[int, list[bytes]]:
    """Collect all values per tag, preserving repetition order."""
    out: dict[int, list[bytes]] = {}
    for tag, value in iter_tlv(data):
        out.setdefault(tag, []).append(value)
    return out
