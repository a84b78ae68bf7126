# tests/test_coordinated.py
import pytest

from src.core.errors import RoundExpired, WrongWorkerForRound
from src.pipeline.elements import END_OF_DATA, PENDING, Batch, Element
from src.worker.coordinated import RoundRobinState


def _batch(key, bucket, seq_len=4):
    return Batch.of([Element(b"", seq_len=seq_len, key=key)], bucket_id=bucket)


def test_rounds_hold_m_batches_of_one_bucket():
    state = RoundRobinState(num_workers=2, num_consumers=2, my_index=0)
    for key, bucket in enumerate([0, 1, 0, 1, 1]):
        state.add(_batch(key, bucket))
    assert state.prepare() == 0
    assert state.rounds[0].bucket_id == 1
    assert state.prepare() == 2
    assert state.rounds[2].bucket_id == 0
    assert state.prepare() is None


def test_every_consumer_gets_its_own_batch_with_the_round_stamped():
    state = RoundRobinState(num_workers=1, num_consumers=3, my_index=0)
    for key in range(3):
        state.add(_batch(key, 0))
    got = [state.get(0, c) for c in range(3)]
    assert [b.keys for b in got] == [(0,), (1,), (2,)]
    assert {b.producer_round for b in got} == {0}
    assert 0 not in state.rounds


def test_rounds_owned_by_other_workers_are_refused():
    state = RoundRobinState(num_workers=3, num_consumers=1, my_index=1)
    with pytest.raises(WrongWorkerForRound):
        state.get(0, 0)
    with pytest.raises(WrongWorkerForRound):
        state.get(5, 0)


def test_pending_then_end_of_data():
    state = RoundRobinState(num_workers=2, num_consumers=2, my_index=1)
    state.add(_batch(0, 0))
    assert state.get(1, 0) is PENDING
    state.add(_batch(1, 0))
    state.finish()
    assert state.get(1, 0).keys == (0,)
    assert state.get(1, 1).keys == (1,)
    assert state.get(3, 0) is END_OF_DATA


def test_released_round_expires():
    state = RoundRobinState(num_workers=1, num_consumers=1, my_index=0)
    state.add(_batch(0, 0))
    state.get(0, 0)
    with pytest.raises(RoundExpired):
        state.get(0, 0)


def test_stalled_consumer_does_not_block_the_others():
    state = RoundRobinState(num_workers=1, num_consumers=2, my_index=0)
    for key in range(20):
        state.add(_batch(key, 0))
    got = [state.get(r, 0) for r in range(6)]
    assert [b.keys for b in got] == [(2 * r,) for r in range(6)]
    # Consumer 1 never fetched; rounds older than two turns are gone.
    assert sorted(state.rounds) == [4, 5]
    assert state.expired_rounds == 4
    assert state.dropped == 4
    with pytest.raises(RoundExpired):
        state.get(1, 1)
    assert state.get(4, 1).keys == (9,)


def test_rounds_inside_the_horizon_wait_for_every_consumer():
    state = RoundRobinState(num_workers=2, num_consumers=2, my_index=0)
    for key in range(8):
        state.add(_batch(key, 0))
    state.get(0, 0)
    state.get(2, 0)
    assert sorted(state.rounds) == [0, 2]
    assert state.get(0, 1).keys == (1,)
    assert state.dropped == 0


def test_short_round_mixes_nearest_buckets_at_the_end():
    state = RoundRobinState(num_workers=1, num_consumers=2, my_index=0)
    state.add(_batch(0, 0, seq_len=2))
    state.add(_batch(1, 2, seq_len=40))
    state.add(_batch(2, 5, seq_len=90))
    state.finish()
    prepared = state.rounds[0]
    assert prepared.bucket_id == 5
    assert [b.keys for b in prepared.batches] == [(2,), (1,)]
    assert state.dropped == 1


def test_starved_bucket_takes_priority():
    state = RoundRobinState(num_workers=2, num_consumers=1, my_index=0)
    state.add(_batch(0, 1))
    for key in range(1, 6):
        state.add(_batch(key, 0))
    chosen = [state.rounds[state.prepare()].bucket_id for _ in range(4)]
    # Bucket 1 waits while bucket 0 is fuller, but not longer than n rounds.
    assert chosen[:3] == [0, 0, 1]


@pytest.mark.parametrize("kwargs", [
    {"num_workers": 2, "num_consumers": 1, "my_index": 2},
    {"num_workers": 2, "num_consumers": 0, "my_index": 0},
])
def test_invalid_layout(kwargs):
    with pytest.raises(ValueError):
        RoundRobinState(**kwargs)
