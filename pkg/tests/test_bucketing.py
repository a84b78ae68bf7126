# tests/test_bucketing.py
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.core.errors import InvalidBoundaries, MalformedSpec
from src.pipeline.bucketing import bucket_and_pad, bucket_bounds, bucket_for_length
from src.pipeline.elements import Batch, Element


@pytest.mark.parametrize("seq_len, bucket", [(0, 0), (1, 0), (4, 0), (5, 1), (8, 1), (9, 2), (1000, 2)])
def test_bucket_for_length(seq_len, bucket):
    assert bucket_for_length(seq_len, [4, 8]) == bucket


def test_bucket_bounds():
    assert bucket_bounds(0, [4, 8]) == (0, 4)
    assert bucket_bounds(1, [4, 8]) == (4, 8)
    assert bucket_bounds(2, [4, 8]) == (8, None)


def test_batches_are_padded_to_their_own_maximum():
    lengths = [3, 10, 2, 12, 4, 1]
    elements = [Element(b"", seq_len=n, key=i) for i, n in enumerate(lengths)]
    batches = list(bucket_and_pad(elements, [5], 2))
    assert [(b.bucket_id, b.keys, b.padded_len) for b in batches] == [
        (0, (0, 2), 3),
        (1, (1, 3), 12),
        (0, (4, 5), 4),
    ]
    assert batches[1].padding_waste == 2


def test_partial_batches_flush_in_bucket_order():
    elements = [Element(b"", seq_len=n, key=i) for i, n in enumerate([50, 2])]
    assert [b.bucket_id for b in bucket_and_pad(elements, [10], 4)] == [0, 1]


def test_invalid_boundaries():
    with pytest.raises(InvalidBoundaries):
        list(bucket_and_pad([], [3, 3], 2))


boundaries = st.lists(st.integers(1, 500), min_size=1, max_size=5, unique=True).map(sorted)


@given(boundaries, st.lists(st.integers(0, 600), max_size=60), st.integers(1, 8))
def test_every_element_lands_in_exactly_one_single_bucket_batch(bounds, lengths, batch_size):
    elements = [Element(b"", seq_len=n, key=i) for i, n in enumerate(lengths)]
    batches = list(bucket_and_pad(elements, bounds, batch_size))
    assert sorted(k for b in batches for k in b.keys) == list(range(len(lengths)))
    for batch in batches:
        assert isinstance(batch, Batch)
        assert 1 <= len(batch.elements) <= batch_size
        assert {bucket_for_length(e.seq_len, bounds) for e in batch.elements} == {batch.bucket_id}
        assert batch.padded_len == max(e.seq_len for e in batch.elements)


@pytest.mark.parametrize("batch_size", [0, -3])
def test_batch_size_below_one_is_a_malformed_spec(batch_size):
    elements = [Element(b"x", seq_len=1, key=0)]
    with pytest.raises(MalformedSpec, match="batch_size"):
        list(bucket_and_pad(elements, [4], batch_size))
