# src/pipeline/bucketing.py
"""
Sequence-length bucketing.

Boundaries [b0, b1, ..., bk] define k + 2 buckets:
    bucket 0 = (0, b0], bucket i = (b(i-1), bi], bucket k+1 = (bk, inf)
A zero-length element falls into bucket 0.
"""

from bisect import bisect_left
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from src.core.errors import MalformedSpec
from src.pipeline.elements import Batch, Element
from src.pipeline.graph import validate_boundaries


def bucket_for_length(seq_len: int, boundaries: Sequence[int]) -> int:
    return bisect_left(boundaries, seq_len)


def bucket_bounds(bucket_id: int, boundaries: Sequence[int]) -> Tuple[int, Optional[int]]:
    """(exclusive lower, inclusive upper) bound of a bucket; upper is None for the last one."""
    lower = 0 if bucket_id == 0 else boundaries[bucket_id - 1]
    upper = boundaries[bucket_id] if bucket_id < len(boundaries) else None
    return lower, upper


def bucket_and_pad(
    source: Iterable[Element],
    boundaries: Sequence[int],
    batch_size: int,
) -> Iterator[Batch]:
    """
    Groups elements into single-bucket batches of `batch_size`, each padded to
    its own maximum length. Partial batches are flushed in bucket order once the
    source is exhausted.

    Raises:
        InvalidBoundaries: boundaries empty, non-positive or not strictly ascending.
        MalformedSpec: batch_size below 1.
    """
    boundaries = validate_boundaries(boundaries)
    if batch_size < 1:
        raise MalformedSpec(f"batch_size must be >= 1, got {batch_size}")
    pending: Dict[int, List[Element]] = {}
    for element in source:
        bucket = bucket_for_length(element.seq_len, boundaries)
        group = pending.setdefault(bucket, [])
        group.append(element)
        if len(group) == batch_size:
            yield Batch.of(group, bucket_id=bucket)
            pending[bucket] = []
    for bucket in sorted(pending):
        if pending[bucket]:
            yield Batch.of(pending[bucket], bucket_id=bucket)
