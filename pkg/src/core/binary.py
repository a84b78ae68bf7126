# src/core/binary.py
"""
Length-prefixed key/value binary encoding.

Both the dataset graph serialization and the wire message bodies are built
from the same pair layout:

    key length  u16 | key UTF-8 | value length u32 | value bytes

Values are self-describing: a one-byte tag followed by the payload. All
integers are little-endian. Maps are always written with sorted keys so the
encoding of a given mapping is canonical.
"""

import struct
from enum import Enum
from typing import Any, Dict, List, Mapping, Tuple

from src.core.errors import MalformedSpec

TAG_NONE = 0
TAG_INT = 1
TAG_UINT = 2
TAG_FLOAT = 3
TAG_BOOL = 4
TAG_STR = 5
TAG_BYTES = 6
TAG_LIST = 7
TAG_MAP = 8

_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


def encode_value(value: Any) -> bytes:
    """Encodes a Python value as tagged bytes."""
    if isinstance(value, Enum):
        value = value.value
    if value is None:
        return bytes([TAG_NONE])
    if isinstance(value, bool):
        return bytes([TAG_BOOL, 1 if value else 0])
    if isinstance(value, int):
        if -(1 << 63) <= value < (1 << 63):
            return bytes([TAG_INT]) + _I64.pack(value)
        if 0 <= value < (1 << 64):
            return bytes([TAG_UINT]) + _U64.pack(value)
        raise MalformedSpec(f"integer {value} does not fit in 64 bits")
    if isinstance(value, float):
        return bytes([TAG_FLOAT]) + _F64.pack(value)
    if isinstance(value, str):
        raw = value.encode("utf-8")
        return bytes([TAG_STR]) + _U32.pack(len(raw)) + raw
    if isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        return bytes([TAG_BYTES]) + _U32.pack(len(raw)) + raw
    if isinstance(value, (list, tuple)):
        parts = [bytes([TAG_LIST]), _U32.pack(len(value))]
        parts.extend(encode_value(item) for item in value)
        return b"".join(parts)
    if isinstance(value, Mapping):
        return bytes([TAG_MAP]) + encode_map(value)
    raise MalformedSpec(f"cannot encode value of type {type(value).__name__}")


def decode_value(buf: bytes, offset: int = 0) -> Tuple[Any, int]:
    """Decodes one tagged value starting at `offset`; returns (value, next offset)."""
    try:
        tag = buf[offset]
        offset += 1
        if tag == TAG_NONE:
            return None, offset
        if tag == TAG_BOOL:
            return buf[offset] != 0, offset + 1
        if tag == TAG_INT:
            return _I64.unpack_from(buf, offset)[0], offset + 8
        if tag == TAG_UINT:
            return _U64.unpack_from(buf, offset)[0], offset + 8
        if tag == TAG_FLOAT:
            return _F64.unpack_from(buf, offset)[0], offset + 8
        if tag in (TAG_STR, TAG_BYTES):
            (length,) = _U32.unpack_from(buf, offset)
            offset += 4
            raw = bytes(buf[offset:offset + length])
            if len(raw) != length:
                raise MalformedSpec("value runs past end of buffer")
            offset += length
            return (raw.decode("utf-8") if tag == TAG_STR else raw), offset
        if tag == TAG_LIST:
            (count,) = _U32.unpack_from(buf, offset)
            offset += 4
            items: List[Any] = []
            for _ in range(count):
                item, offset = decode_value(buf, offset)
                items.append(item)
            return items, offset
        if tag == TAG_MAP:
            return decode_map(buf, offset)
    except (IndexError, struct.error, UnicodeDecodeError) as e:
        raise MalformedSpec(f"undecodable value at offset {offset}: {e}") from e
    raise MalformedSpec(f"unknown value tag {tag} at offset {offset - 1}")


def encode_pair(key: str, value: Any) -> bytes:
    """Encodes one (key, value) pair in the shared pair layout."""
    raw_key = key.encode("utf-8")
    raw_value = encode_value(value)
    return _U16.pack(len(raw_key)) + raw_key + _U32.pack(len(raw_value)) + raw_value


def decode_pair(buf: bytes, offset: int) -> Tuple[str, Any, int]:
    try:
        (key_len,) = _U16.unpack_from(buf, offset)
        offset += 2
        key = bytes(buf[offset:offset + key_len]).decode("utf-8")
        offset += key_len
        (value_len,) = _U32.unpack_from(buf, offset)
        offset += 4
    except (struct.error, UnicodeDecodeError) as e:
        raise MalformedSpec(f"undecodable pair header at offset {offset}: {e}") from e
    end = offset + value_len
    if end > len(buf):
        raise MalformedSpec("pair value runs past end of buffer")
    value, consumed = decode_value(buf, offset)
    if consumed != end:
        raise MalformedSpec(f"pair '{key}' length mismatch")
    return key, value, end


def encode_map(mapping: Mapping[str, Any]) -> bytes:
    """u16 pair count followed by the pairs, sorted by key."""
    if len(mapping) > 0xFFFF:
        raise MalformedSpec("too many keys in map")
    parts = [_U16.pack(len(mapping))]
    parts.extend(encode_pair(key, mapping[key]) for key in sorted(mapping))
    return b"".join(parts)


def decode_map(buf: bytes, offset: int = 0) -> Tuple[Dict[str, Any], int]:
    try:
        (count,) = _U16.unpack_from(buf, offset)
    except struct.error as e:
        raise MalformedSpec("map header truncated") from e
    offset += 2
    result: Dict[str, Any] = {}
    for _ in range(count):
        key, value, offset = decode_pair(buf, offset)
        result[key] = value
    return result, offset


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
