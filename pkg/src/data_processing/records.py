# src/data_processing/records.py
"""
Record file storage.

A record file is:

    magic "DFRG" | version u16 | record count u64
    per record: total_len u32 | seq_len u32 | crc32 u32 | payload

`total_len` covers the record header and payload. The CRC32 covers the
little-endian seq_len followed by the payload, so flipping any byte of a
record body is detected. All integers are little-endian.
"""

import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Sequence, Union

from src.core.errors import CorruptRecord, IoFailure
from src.data_processing.shards import ShardSpec
from src.pipeline.elements import Element, range_element

logger = logging.getLogger(__name__)

MAGIC = b"DFRG"
FORMAT_VERSION = 1
RECORD_SUFFIX = ".dfrg"

_FILE_HEADER = struct.Struct("<4sHQ")
_RECORD_HEADER = struct.Struct("<III")
_SEQ_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class RecordFile:
    path: Path
    count: int


def make_key(file_index: int, ordinal: int) -> int:
    """Dataset-unique element key: file index in the high 32 bits, ordinal in the low."""
    return (file_index << 32) | ordinal


def record_checksum(seq_len: int, payload: bytes) -> int:
    return zlib.crc32(payload, zlib.crc32(_SEQ_LEN.pack(seq_len)))


def write_records(path: Union[str, Path], elements: Iterable[Element]) -> RecordFile:
    """
    Writes elements to a record file atomically (temporary file + rename).

    Raises:
        IoFailure: the file cannot be written.
    """
    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    count = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp_path, "wb") as f:
            f.write(_FILE_HEADER.pack(MAGIC, FORMAT_VERSION, 0))
            for element in elements:
                payload = bytes(element.payload)
                f.write(_RECORD_HEADER.pack(
                    _RECORD_HEADER.size + len(payload),
                    element.seq_len,
                    record_checksum(element.seq_len, payload),
                ))
                f.write(payload)
                count += 1
            f.seek(0)
            f.write(_FILE_HEADER.pack(MAGIC, FORMAT_VERSION, count))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except OSError as e:
        raise IoFailure(f"cannot write record file '{path}': {e}") from e
    except struct.error as e:
        raise IoFailure(f"record does not fit the format: {e}") from e
    logger.debug(f"Wrote {count} records to '{path}'.")
    return RecordFile(path=path, count=count)


def _read_header(f: BinaryIO, path: Path) -> int:
    raw = f.read(_FILE_HEADER.size)
    if len(raw) != _FILE_HEADER.size:
        raise CorruptRecord(0, f"'{path}' is too short for a record file header")
    magic, version, count = _FILE_HEADER.unpack(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise CorruptRecord(0, f"'{path}' has magic {magic!r} version {version}")
    return count


def scan_record_file(path: Union[str, Path]) -> int:
    """Returns the record count stored in the file header."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return _read_header(f, path)
    except OSError as e:
        raise IoFailure(f"cannot read record file '{path}': {e}") from e


def _iter_file(path: Path, file_index: int, start: int, end: Optional[int]) -> Iterator[Element]:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise IoFailure(f"cannot open record file '{path}': {e}") from e
    with f:
        count = _read_header(f, path)
        stop = count if end is None else min(end, count)
        offset = _FILE_HEADER.size
        for ordinal in range(stop):
            header = f.read(_RECORD_HEADER.size)
            if len(header) != _RECORD_HEADER.size:
                raise CorruptRecord(offset, "truncated record header")
            total_len, seq_len, crc = _RECORD_HEADER.unpack(header)
            payload_len = total_len - _RECORD_HEADER.size
            if payload_len < 0:
                raise CorruptRecord(offset, f"invalid record length {total_len}")
            if ordinal < start:
                # Element-range shards skip by ordinal without touching payloads.
                f.seek(payload_len, os.SEEK_CUR)
                offset += total_len
                continue
            payload = f.read(payload_len)
            if len(payload) != payload_len:
                raise CorruptRecord(offset, "truncated payload")
            if record_checksum(seq_len, payload) != crc:
                raise CorruptRecord(offset)
            yield Element(payload=payload, seq_len=seq_len, key=make_key(file_index, ordinal))
            offset += total_len


def read_records(shard: ShardSpec) -> Iterator[Element]:
    """
    Yields exactly the records of `shard`, in file order.

    Shards without files are virtual range shards: they yield range elements
    with keys [start, end).

    Raises:
        IoFailure: a shard file is missing or unreadable.
        CorruptRecord: a record fails its checksum; the shard is aborted.
    """
    if not shard.paths:
        yield from (range_element(i) for i in range(shard.start or 0, shard.end or 0))
        return
    for path, file_index in zip(shard.paths, shard.file_indices):
        start = shard.start if shard.start is not None else 0
        yield from _iter_file(Path(path), file_index, start, shard.end)


def read_record_file(path: Union[str, Path], file_index: int = 0) -> Iterator[Element]:
    """Reads every record of a single file."""
    return _iter_file(Path(path), file_index, 0, None)


class RecordSource:
    """Re-iterable source over a fixed sequence of shards."""

    def __init__(self, shards: Sequence[ShardSpec]):
        self.shards = list(shards)

    def __iter__(self) -> Iterator[Element]:
        for shard in self.shards:
            yield from read_records(shard)
