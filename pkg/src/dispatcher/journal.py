# src/dispatcher/journal.py
"""
Write-ahead journal of dispatcher state changes.

The journal is one append-only file. Each record is

    length u32 | crc32 u32 | sequence u64 | event_type u16 | payload

where `length` counts the bytes after the crc field and the CRC32 covers
those same bytes. The payload is a key/value map in the shared binary
encoding. A final record that is short or fails its checksum is a torn write
and is cut off on recovery; damage anywhere else is fatal.
"""

import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from src.core.binary import decode_map, encode_map
from src.core.errors import CorruptJournal, IoFailure, MalformedSpec

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<II")
_BODY_HEADER = struct.Struct("<QH")


class EventType(IntEnum):
    WORKER_REGISTERED = 1
    JOB_REGISTERED = 2
    TASK_CREATED = 3
    SPLIT_ASSIGNED = 4
    SPLIT_COMPLETED = 5
    JOB_COMPLETED = 6
    CLIENT_JOINED = 7
    WORKER_LOST = 8
    TASK_COMPLETED = 9
    EPOCH_STARTED = 10


@dataclass(frozen=True)
class JournalRecord:
    seq: int
    event: EventType
    payload: Dict[str, Any]

    def encode(self) -> bytes:
        body = _BODY_HEADER.pack(self.seq, int(self.event)) + encode_map(self.payload)
        return _PREFIX.pack(len(body), zlib.crc32(body)) + body


def _decode_body(body: bytes, offset: int) -> JournalRecord:
    seq, event_code = _BODY_HEADER.unpack_from(body, 0)
    try:
        event = EventType(event_code)
    except ValueError as e:
        raise CorruptJournal(f"unknown event type {event_code} at offset {offset}") from e
    try:
        payload, end = decode_map(body, _BODY_HEADER.size)
    except MalformedSpec as e:
        raise CorruptJournal(f"undecodable payload at offset {offset}: {e}") from e
    if end != len(body):
        raise CorruptJournal(f"trailing bytes in record at offset {offset}")
    return JournalRecord(seq=seq, event=event, payload=payload)


def _complete_record_at(data: bytes, offset: int) -> bool:
    if len(data) - offset < _PREFIX.size:
        return False
    length, crc = _PREFIX.unpack_from(data, offset)
    end = offset + _PREFIX.size + length
    return length >= _BODY_HEADER.size and end <= len(data) and zlib.crc32(data[offset + _PREFIX.size:end]) == crc


def _records_follow(data: bytes, offset: int) -> bool:
    """True if a complete, checksummed record starts anywhere after `offset`."""
    return any(_complete_record_at(data, p) for p in range(offset + 1, len(data) - _PREFIX.size + 1))


def parse_journal(data: bytes) -> Tuple[List[JournalRecord], int]:
    """
    Splits raw journal bytes into records.

    Returns:
        (records, valid_length): the complete records and the byte length
        they occupy; anything past `valid_length` is a torn tail.

    Raises:
        CorruptJournal: a non-final record is damaged, or sequence numbers
            do not strictly increase.
    """
    records: List[JournalRecord] = []
    offset = 0
    last_seq = 0
    while offset < len(data):
        if len(data) - offset < _PREFIX.size:
            break
        length, crc = _PREFIX.unpack_from(data, offset)
        end = offset + _PREFIX.size + length
        if end > len(data):
            # A short final append, unless intact records follow a damaged length.
            if _records_follow(data, offset):
                raise CorruptJournal(f"length {length} of record at offset {offset} runs past intact records")
            break
        body = data[offset + _PREFIX.size:end]
        if length < _BODY_HEADER.size or zlib.crc32(body) != crc:
            if end == len(data):
                break
            raise CorruptJournal(f"checksum mismatch in record at offset {offset}")
        record = _decode_body(body, offset)
        if record.seq <= last_seq:
            raise CorruptJournal(f"sequence {record.seq} at offset {offset} follows {last_seq}")
        last_seq = record.seq
        records.append(record)
        offset = end
    return records, offset


class Journal:
    """
    Append-only journal file.

    Args:
        path: Journal file location; parent directories are created.
        fsync: Whether every append is forced to stable storage before it
            returns.
    """

    def __init__(self, path: Union[str, Path], fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self._file = None
        self._lock = threading.Lock()

    def recover(self) -> List[JournalRecord]:
        """Reads all complete records and cuts off a torn tail."""
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            data = self.path.read_bytes() if self.path.exists() else b""
        except OSError as e:
            raise IoFailure(f"cannot read journal '{self.path}': {e}") from e
        records, valid = parse_journal(data)
        if valid < len(data):
            logger.warning(
                f"Journal '{self.path}' has a torn tail of {len(data) - valid} bytes; truncating."
            )
            try:
                with open(self.path, "r+b") as f:
                    f.truncate(valid)
            except OSError as e:
                raise IoFailure(f"cannot truncate journal '{self.path}': {e}") from e
        logger.info(f"Recovered {len(records)} journal records from '{self.path}'.")
        return records

    def append(self, record: JournalRecord) -> None:
        data = record.encode()
        with self._lock:
            try:
                if self._file is None:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    self._file = open(self.path, "ab")
                self._file.write(data)
                self._file.flush()
                if self.fsync:
                    os.fsync(self._file.fileno())
            except OSError as e:
                raise IoFailure(f"cannot append to journal '{self.path}': {e}") from e

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None


class MemoryJournal:
    """In-memory journal with the same interface, for tests and ephemeral runs."""

    def __init__(self, data: Optional[bytes] = None):
        self.buffer = bytearray(data or b"")

    def recover(self) -> List[JournalRecord]:
        records, valid = parse_journal(bytes(self.buffer))
        del self.buffer[valid:]
        return records

    def append(self, record: JournalRecord) -> None:
        self.buffer.extend(record.encode())

    def close(self) -> None:
        pass
