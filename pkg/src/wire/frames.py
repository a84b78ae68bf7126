# src/wire/frames.py
"""
Frame codec.

    length u32 | msg_type u16 | correlation_id u64 | flags u16 | body

`length` is the body length in bytes. Flag bit 0 marks an LZ4-frame
compressed body; LZ4 frames carry a content checksum, so a damaged compressed
body is reported as ChecksumMismatch. Every connection starts with a
preamble: magic "DFS1", protocol version u16, requested codec u8.
"""

import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional, Tuple

import lz4.frame
from pydantic import ValidationError

from src.core.binary import decode_map, encode_map
from src.core.errors import BodyTooLarge, ChecksumMismatch, ConnectionLost, MalformedSpec, Truncated, UnknownType
from src.wire.messages import MESSAGE_TYPES, Message

HEADER = struct.Struct("<IHQH")
PREAMBLE = struct.Struct("<4sHB")
MAGIC = b"DFS1"
PROTOCOL_VERSION = 1
MAX_BODY_BYTES = 64 * 1024 * 1024
FLAG_COMPRESSED = 0x0001

CODEC_NONE = 0
CODEC_LZ4 = 1
CODECS = {"none": CODEC_NONE, "lz4": CODEC_LZ4}

_VERSION_KEY = "__v"


@dataclass(frozen=True)
class Frame:
    msg_type: int
    correlation_id: int
    flags: int
    body: bytes

    @property
    def compressed(self) -> bool:
        return bool(self.flags & FLAG_COMPRESSED)


def encode_body(message: Message) -> bytes:
    fields = message.model_dump(mode="python")
    fields[_VERSION_KEY] = message.VERSION
    return encode_map(fields)


def decode_body(msg_type: int, body: bytes) -> Message:
    cls = MESSAGE_TYPES.get(msg_type)
    if cls is None:
        raise UnknownType(msg_type, HEADER.size + len(body))
    fields, end = decode_map(body, 0)
    if end != len(body):
        raise MalformedSpec(f"trailing bytes in {cls.__name__} body")
    version = fields.pop(_VERSION_KEY, None)
    if version is None or version > cls.VERSION:
        raise MalformedSpec(f"{cls.__name__} schema version {version} is not supported")
    try:
        return cls.model_validate(fields)
    except ValidationError as e:
        raise MalformedSpec(f"invalid {cls.__name__}: {e}") from e


def encode_frame(message: Message, correlation_id: int = 0, compressed: bool = False) -> bytes:
    """
    Raises:
        BodyTooLarge: the encoded body exceeds 64 MiB.
    """
    body = encode_body(message)
    if len(body) > MAX_BODY_BYTES:
        raise BodyTooLarge(f"{type(message).__name__} body is {len(body)} bytes")
    flags = 0
    if compressed:
        body = lz4.frame.compress(body, content_checksum=True)
        flags |= FLAG_COMPRESSED
    return HEADER.pack(len(body), message.MSG_TYPE, correlation_id, flags) + body


def parse_frame(data: bytes) -> Tuple[Frame, int]:
    """
    Splits one frame off the front of `data`; returns (frame, bytes consumed).

    Raises:
        Truncated: `data` holds less than one complete frame.
        BodyTooLarge: the header announces a body over the limit.
    """
    if len(data) < HEADER.size:
        raise Truncated(f"need {HEADER.size} header bytes, have {len(data)}")
    length, msg_type, correlation_id, flags = HEADER.unpack_from(data, 0)
    if length > MAX_BODY_BYTES:
        raise BodyTooLarge(f"frame announces a {length}-byte body")
    end = HEADER.size + length
    if len(data) < end:
        raise Truncated(f"need {end} bytes, have {len(data)}")
    return Frame(msg_type, correlation_id, flags, bytes(data[HEADER.size:end])), end


def frame_to_message(frame: Frame) -> Message:
    """
    Raises:
        UnknownType: the message type is not in the catalog.
        ChecksumMismatch: a compressed body fails to decompress.
    """
    if frame.msg_type not in MESSAGE_TYPES:
        raise UnknownType(frame.msg_type, HEADER.size + len(frame.body))
    body = frame.body
    if frame.compressed:
        try:
            body = lz4.frame.decompress(body)
        except RuntimeError as e:
            raise ChecksumMismatch(f"compressed body of type 0x{frame.msg_type:04x} is damaged: {e}") from e
    return decode_body(frame.msg_type, body)


def decode_frame(data: bytes) -> Message:
    """Decodes one complete frame into its message."""
    frame, _ = parse_frame(data)
    return frame_to_message(frame)


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if data is None or len(data) < size:
        raise ConnectionLost("peer closed the connection")
    return data


def read_frame(stream: BinaryIO) -> Frame:
    """Reads one frame from a blocking binary stream."""
    header = _read_exact(stream, HEADER.size)
    length, msg_type, correlation_id, flags = HEADER.unpack(header)
    if length > MAX_BODY_BYTES:
        raise BodyTooLarge(f"frame announces a {length}-byte body")
    body = _read_exact(stream, length) if length else b""
    return Frame(msg_type, correlation_id, flags, body)


def encode_preamble(codec: int) -> bytes:
    return PREAMBLE.pack(MAGIC, PROTOCOL_VERSION, codec)


def read_preamble(stream: BinaryIO) -> int:
    """Validates a peer preamble and returns its codec."""
    magic, version, codec = PREAMBLE.unpack(_read_exact(stream, PREAMBLE.size))
    if magic != MAGIC or version != PROTOCOL_VERSION:
        raise ConnectionLost(f"bad preamble {magic!r} v{version}")
    return codec


def codec_for(name: Optional[str]) -> int:
    return CODECS.get((name or "none").lower(), CODEC_NONE)
