# src/data_processing/shards.py
"""
Shard enumeration.

A shard is the unit of work handed to a worker. Shards of one dataset never
overlap: file shards cover whole files, file-set shards cover groups of
files, and element-range shards cover record ordinals [start, end) of one
file. Range shards are keyed by record ordinal, not byte offset.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from src.core.errors import EmptyDataset, IoFailure, MalformedSpec

logger = logging.getLogger(__name__)

FILE = "file"
ELEMENT_RANGE = "element-range"
FILE_SET = "file-set"
GRANULARITIES = (FILE, ELEMENT_RANGE, FILE_SET)


@dataclass(frozen=True)
class ShardSpec:
    shard_id: int
    granularity: str
    paths: Tuple[str, ...] = ()
    file_indices: Tuple[int, ...] = ()
    start: Optional[int] = None
    end: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "shard_id": self.shard_id,
            "granularity": self.granularity,
            "paths": list(self.paths),
            "file_indices": list(self.file_indices),
            "start": self.start,
            "end": self.end,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ShardSpec":
        return cls(
            shard_id=data["shard_id"],
            granularity=data["granularity"],
            paths=tuple(data.get("paths") or ()),
            file_indices=tuple(data.get("file_indices") or ()),
            start=data.get("start"),
            end=data.get("end"),
        )


def list_record_files(dataset_dir: Union[str, Path]) -> List[Path]:
    from src.data_processing.records import RECORD_SUFFIX

    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise IoFailure(f"dataset directory '{dataset_dir}' does not exist")
    return sorted(p for p in dataset_dir.iterdir() if p.suffix == RECORD_SUFFIX and p.is_file())


def _split_range(count: int, parts: int) -> List[Tuple[int, int]]:
    """Splits [0, count) into `parts` contiguous, near-equal, non-empty ranges."""
    bounds = [count * i // parts for i in range(parts + 1)]
    return [(lo, hi) for lo, hi in zip(bounds, bounds[1:]) if hi > lo]


def _allocate(counts: Sequence[int], target: int) -> List[int]:
    """Distributes `target` shards over files proportionally to their record counts."""
    total = sum(counts)
    ideal = [target * c / total for c in counts]
    alloc = [min(c, max(1, int(x))) if c else 0 for c, x in zip(counts, ideal)]
    # Hand out what is left by largest remainder, never exceeding a file's records.
    order = sorted(range(len(counts)), key=lambda i: (ideal[i] - int(ideal[i])), reverse=True)
    while sum(alloc) < target:
        progressed = False
        for i in order:
            if sum(alloc) >= target:
                break
            if alloc[i] < counts[i]:
                alloc[i] += 1
                progressed = True
        if not progressed:
            break
    return alloc


def enumerate_shards(
    dataset_dir: Union[str, Path],
    granularity: str = FILE,
    shards_per_worker_hint: int = 1,
    num_workers: int = 1,
) -> List[ShardSpec]:
    """
    Partitions a record dataset into disjoint shards covering every record.

    With element-range and file-set granularity the shard count targets
    `shards_per_worker_hint * num_workers`.

    Raises:
        EmptyDataset: the directory holds no record files (or, for element
            ranges, no records).
    """
    if granularity not in GRANULARITIES:
        raise MalformedSpec(f"unknown shard granularity '{granularity}'")
    files = list_record_files(dataset_dir)
    if not files:
        raise EmptyDataset(f"no record files in '{dataset_dir}'")
    target = max(1, shards_per_worker_hint * num_workers)

    if granularity == FILE:
        return [
            ShardSpec(shard_id=i, granularity=FILE, paths=(str(path),), file_indices=(i,))
            for i, path in enumerate(files)
        ]

    if granularity == FILE_SET:
        groups = min(target, len(files))
        shards = []
        for g in range(groups):
            members = [i for i in range(len(files)) if i * groups // len(files) == g]
            shards.append(ShardSpec(
                shard_id=g,
                granularity=FILE_SET,
                paths=tuple(str(files[i]) for i in members),
                file_indices=tuple(members),
            ))
        return shards

    from src.data_processing.records import scan_record_file

    counts = [scan_record_file(path) for path in files]
    if sum(counts) == 0:
        raise EmptyDataset(f"record files in '{dataset_dir}' hold no records")
    shards: List[ShardSpec] = []
    for file_index, (path, parts) in enumerate(zip(files, _allocate(counts, target))):
        for start, end in _split_range(counts[file_index], parts) if parts else []:
            shards.append(ShardSpec(
                shard_id=len(shards),
                granularity=ELEMENT_RANGE,
                paths=(str(path),),
                file_indices=(file_index,),
                start=start,
                end=end,
            ))
    logger.info(f"Enumerated {len(shards)} element-range shards over {sum(counts)} records.")
    return shards


def enumerate_range_shards(start: int, end: int, num_shards: int) -> List[ShardSpec]:
    """Splits a virtual range source [start, end) into contiguous key ranges."""
    if end <= start:
        raise EmptyDataset(f"range [{start}, {end}) is empty")
    return [
        ShardSpec(shard_id=i, granularity=ELEMENT_RANGE, start=start + lo, end=start + hi)
        for i, (lo, hi) in enumerate(_split_range(end - start, max(1, num_shards)))
    ]
