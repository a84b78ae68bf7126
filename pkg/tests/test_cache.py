# tests/test_cache.py
import pytest

from src.pipeline.elements import END_OF_DATA, PENDING, Batch, Element
from src.worker.cache import SlidingWindowCache


class Counter:
    def __init__(self, limit=None):
        self.n = 0
        self.limit = limit

    def __call__(self):
        if self.limit is not None and self.n >= self.limit:
            return END_OF_DATA
        batch = Batch.of([Element(b"", seq_len=1, key=self.n)])
        self.n += 1
        return batch


def test_ten_batches_through_a_window_of_four():
    cache = SlidingWindowCache(capacity=4)
    produce = Counter()
    for _ in range(10):
        cache.read(1, produce)
    snap = cache.snapshot()
    assert snap.produced == 10
    assert snap.evictions == 6
    assert snap.window_floor == 6
    assert snap.next_seq == 10


def test_clients_at_the_same_position_share_production():
    cache = SlidingWindowCache(capacity=4)
    produce = Counter()
    a = [cache.read(1, produce).keys for _ in range(3)]
    b = [cache.read(2, produce).keys for _ in range(3)]
    assert a == b
    assert produce.n == 3


def test_lagging_pointer_is_clamped_to_the_floor():
    cache = SlidingWindowCache(capacity=2)
    produce = Counter()
    cache.read(1, produce)
    cache.read(2, produce)
    for _ in range(4):
        cache.read(2, produce)
    # Client 1 sits at 1, which was evicted; it resumes at the floor.
    assert cache.pointer(1) == cache.floor == 3
    assert cache.read(1, produce).keys == (3,)


def test_markers_pass_through_without_moving_the_pointer():
    cache = SlidingWindowCache(capacity=2)
    assert cache.read(1, lambda: PENDING) is PENDING
    assert cache.read(1, Counter(limit=0)) is END_OF_DATA
    assert cache.pointer(1) == 0


def test_unbounded_window_never_evicts():
    cache = SlidingWindowCache(capacity=None)
    produce = Counter()
    for _ in range(50):
        cache.read(1, produce)
    assert cache.snapshot().evictions == 0
    assert cache.read(2, produce).keys == (0,)


def test_capacity_must_be_positive():
    with pytest.raises(ValueError):
        SlidingWindowCache(capacity=0)
