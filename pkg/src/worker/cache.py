# src/worker/cache.py
"""
Sliding-window batch cache shared by the clients of one job.

The window holds batches [next_seq - len(window), next_seq). Each client has
a read pointer; a pointer that fell below the window floor is clamped to the
floor, so an evicted batch is never served. A client reading at the front
triggers production of the next batch, which evicts the oldest batch when
the window is full.
"""

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, Optional

from src.pipeline.elements import Batch

Producer = Callable[[], Any]


@dataclass
class CacheSnapshot:
    window_floor: int
    next_seq: int
    pointers: Dict[int, int] = field(default_factory=dict)
    evictions: int = 0
    produced: int = 0


class SlidingWindowCache:
    """
    Args:
        capacity: Window size W in batches; None keeps every batch.
    """

    def __init__(self, capacity: Optional[int] = 16):
        if capacity is not None and capacity < 1:
            raise ValueError("window capacity must be at least 1")
        self.capacity = capacity
        self.window: Deque[Batch] = deque()
        self.next_seq = 0
        self.pointers: Dict[int, int] = {}
        self.evictions = 0
        self.produced = 0
        self._lock = threading.Lock()

    @property
    def floor(self) -> int:
        return self.next_seq - len(self.window)

    def pointer(self, client_id: int) -> int:
        """Effective (clamped) read position of a client."""
        with self._lock:
            return max(self.pointers.get(client_id, self.floor), self.floor)

    def read(self, client_id: int, produce: Producer) -> Any:
        """
        Serves the batch at the client's pointer and advances it.

        At the front, `produce()` is asked for a new batch. Anything it returns
        that is not a `Batch` (a pending or end marker) is passed through and
        the pointer stays put.
        """
        with self._lock:
            p = max(self.pointers.get(client_id, self.floor), self.floor)
            if p < self.next_seq:
                self.pointers[client_id] = p + 1
                return self.window[p - self.floor]
            item = produce()
            if not isinstance(item, Batch):
                self.pointers[client_id] = p
                return item
            if self.capacity is not None and len(self.window) >= self.capacity:
                self.window.popleft()
                self.evictions += 1
            self.window.append(item)
            self.next_seq += 1
            self.produced += 1
            self.pointers[client_id] = self.next_seq
            return item

    def snapshot(self) -> CacheSnapshot:
        with self._lock:
            floor = self.floor
            return CacheSnapshot(
                window_floor=floor,
                next_seq=self.next_seq,
                pointers={c: max(p, floor) for c, p in self.pointers.items()},
                evictions=self.evictions,
                produced=self.produced,
            )
