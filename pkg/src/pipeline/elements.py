# src/pipeline/elements.py
"""
Data items that flow through a pipeline: elements, padded batches and
bucket windows, plus the end-of-data marker returned by exhausted streams.
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple


@dataclass(frozen=True)
class Element:
    """One source sample. `seq_len` is its logical length in tokens."""
    payload: bytes
    seq_len: int
    key: int


@dataclass(frozen=True)
class Batch:
    """
    An ordered group of elements, logically padded to `padded_len`.

    `padded_len` is the maximum `seq_len` of the batch; each element keeps its
    own `seq_len` as the validity length of its padded region.
    """
    elements: Tuple[Element, ...]
    padded_len: int
    bucket_id: Optional[int] = None
    producer_round: Optional[int] = None

    @classmethod
    def of(cls, elements: Sequence[Element], bucket_id: Optional[int] = None) -> "Batch":
        if not elements:
            raise ValueError("a batch needs at least one element")
        return cls(
            elements=tuple(elements),
            padded_len=max(e.seq_len for e in elements),
            bucket_id=bucket_id,
        )

    @property
    def keys(self) -> Tuple[int, ...]:
        return tuple(e.key for e in self.elements)

    @property
    def padding_waste(self) -> int:
        """Padded token slots that carry no data."""
        return sum(self.padded_len - e.seq_len for e in self.elements)

    def for_round(self, round_index: int, bucket_id: Optional[int] = None) -> "Batch":
        return replace(
            self,
            producer_round=round_index,
            bucket_id=self.bucket_id if bucket_id is None else bucket_id,
        )


@dataclass(frozen=True)
class Window:
    """Consecutive same-bucket batches grouped by `group_by_window`."""
    batches: Tuple[Batch, ...]
    bucket_id: Optional[int]


def range_element(i: int) -> Element:
    """Element produced by a virtual range source: key i, one token."""
    return Element(payload=i.to_bytes(8, "little", signed=True), seq_len=1, key=i)


class _Marker:
    def __init__(self, name: str):
        self._name = name

    def __repr__(self) -> str:
        return self._name

    def __reduce__(self):
        return self._name


END_OF_DATA = _Marker("END_OF_DATA")
# Returned by serving paths when production has not caught up yet.
PENDING = _Marker("PENDING")
