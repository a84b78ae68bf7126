# tests/test_client.py
import threading
from collections import Counter

import pytest

from src.client.config import DistributeConfig
from src.client.stream import END_OF_JOB, RemoteStream, distribute
from src.core.errors import AllWorkersLost, ConfigError, ConnectionLost, DispatcherUnreachable, PolicyMismatch
from src.pipeline.elements import Batch, Element
from src.pipeline.graph import Pipeline
from src.wire.messages import JobUpdate, WorkerEndpoint

pytestmark = pytest.mark.slow


def _keys(stream):
    return [k for batch in stream for k in batch.keys]


@pytest.mark.parametrize("policy", ["DYNAMIC", "STATIC"])
def test_sharded_policies_visit_each_element_once(start_workers, client_options, policy):
    start_workers(3)
    graph = Pipeline.range(0, 300).batch(10)
    with distribute(graph, sharding_policy=policy, shards_per_worker_hint=2, **client_options) as stream:
        keys = _keys(stream)
    assert sorted(keys) == list(range(300))


def test_dynamic_epochs_visit_each_element_per_epoch(start_workers, client_options):
    start_workers(2)
    graph = Pipeline.range(0, 100).batch(5)
    with distribute(graph, sharding_policy="DYNAMIC", num_epochs=3, **client_options) as stream:
        keys = _keys(stream)
    assert Counter(keys) == {k: 3 for k in range(100)}


def test_off_policy_gives_one_pass_per_worker(start_workers, client_options):
    start_workers(2)
    with distribute(Pipeline.range(0, 50).batch(5), **client_options) as stream:
        keys = _keys(stream)
    assert Counter(keys) == {k: 2 for k in range(50)}


def test_records_dataset_with_fetch_parallelism(start_workers, client_options, small_dataset):
    data_dir, manifest = small_dataset
    start_workers(2)
    graph = Pipeline.records(str(data_dir)).map("reverse_payload", parallelism=2).batch(7)
    with distribute(graph, sharding_policy="DYNAMIC", fetch_parallelism=3, **client_options) as stream:
        keys = _keys(stream)
    assert len(keys) == len(set(keys)) == manifest.total_records


def test_shared_job_gives_every_client_a_full_pass(start_workers, client_options):
    start_workers(1, window_batches=64)
    graph = Pipeline.range(0, 80).batch(4)
    results = {}

    def consume(name):
        with distribute(graph, job_name="shared", sharing=True, **client_options) as stream:
            results[name] = sorted(_keys(stream))

    threads = [threading.Thread(target=consume, args=(i,)) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    assert results == {i: list(range(80)) for i in range(3)}


def test_coordinated_clients_step_through_rounds_together(start_workers, client_options, bimodal_dataset):
    data_dir, _ = bimodal_dataset
    start_workers(2)
    graph = Pipeline.records(str(data_dir)).bucket_by_sequence_length([128], 4)
    step = threading.Barrier(2)
    results = {}

    def consume(index):
        batches = []
        with distribute(
            graph, job_name="coord", num_consumers=2, consumer_index=index, buffer_capacity=2, **client_options
        ) as stream:
            for batch in stream:
                batches.append(batch)
                step.wait(timeout=30)
        results[index] = batches

    threads = [threading.Thread(target=consume, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    first, second = results[0], results[1]
    assert len(first) == len(second) > 0
    assert [b.producer_round for b in first] == list(range(len(first)))
    assert [b.bucket_id for b in first] == [b.bucket_id for b in second]


def test_expired_round_is_skipped_not_fatal():
    config = DistributeConfig(dispatcher_address="127.0.0.1:1", num_consumers=2, consumer_index=1)
    stream = RemoteStream(Pipeline.range(0, 4).build(), config)
    stream._num_workers = 1
    stream._skipped.add(0)
    stream._slots[1] = Batch.of([Element(b"", seq_len=1, key=7)], bucket_id=0)
    try:
        assert stream.next_batch(timeout=1).keys == (7,)
        assert stream.rounds_skipped == 1
        assert stream.batches_consumed == 1
    finally:
        stream.close()


def test_local_reads_use_the_in_process_worker(start_workers, client_options):
    start_workers(1, local=True)
    with distribute(Pipeline.range(0, 20).batch(5), read_sources="local", **client_options) as stream:
        assert sorted(_keys(stream)) == list(range(20))


def test_remote_reads_ignore_local_workers(start_workers, client_options):
    start_workers(1, local=True)
    start_workers(1)
    with distribute(Pipeline.range(0, 20).batch(5), **client_options) as stream:
        assert sorted(_keys(stream)) == list(range(20))


def test_same_name_different_pipeline_is_rejected(start_workers, client_options):
    start_workers(1)
    with distribute(Pipeline.range(0, 10**6).batch(5), job_name="j", **client_options):
        with pytest.raises(PolicyMismatch):
            distribute(Pipeline.range(0, 10**6).batch(6), job_name="j", **client_options)


def test_losing_every_worker_raises(start_workers, client_options):
    (worker,) = start_workers(1)
    stream = distribute(Pipeline.range(0, 10**9).batch(2), workers_lost_grace_ms=300, buffer_capacity=2, **client_options)
    try:
        assert stream.next_batch(timeout=10) is not END_OF_JOB
        worker.stop()
        with pytest.raises(AllWorkersLost):
            for _ in range(10**6):
                stream.next_batch(timeout=10)
    finally:
        stream.close()


def test_unreachable_dispatcher():
    with pytest.raises(DispatcherUnreachable):
        distribute(Pipeline.range(0, 4), dispatcher_address="127.0.0.1:1", rpc_timeout_ms=500)


@pytest.mark.parametrize("values", [
    {"num_consumers": 2},
    {"consumer_index": 0},
    {"num_consumers": 2, "consumer_index": 2},
    {"num_consumers": 2, "consumer_index": 0, "sharing": True},
    {"sharding_policy": "SOMETIMES"},
    {"buffer_capacity": 0},
])
def test_inconsistent_config(values):
    with pytest.raises(ConfigError):
        DistributeConfig.create(dispatcher_address="h:1", **values)


def test_dispatcher_address_from_environment(monkeypatch):
    monkeypatch.setenv("DFS_DISPATCHER", "10.1.2.3:5050")
    assert DistributeConfig().dispatcher_address == "10.1.2.3:5050"


def test_job_updates_are_idempotent():
    config = DistributeConfig(dispatcher_address="127.0.0.1:1", rpc_timeout_ms=200)
    stream = RemoteStream(Pipeline.range(0, 4).build(), config)
    stream.job_id, stream.client_id = 1, 1
    update = JobUpdate(job_id=1, workers=[WorkerEndpoint(worker_id=5, address="127.0.0.1:1")])
    try:
        stream.handle_job_update(update)
        stream.handle_job_update(update)
        assert list(stream.channels) == [5]
        assert len(stream._fetchers) == 1
        stream.handle_job_update(JobUpdate(job_id=1, workers=[], job_done=True))
        assert stream.retired_workers == {5}
        assert stream.job_done
    finally:
        stream.close()


def test_retired_worker_that_reappears_gets_a_fresh_channel(monkeypatch):
    spawned = []
    monkeypatch.setattr(RemoteStream, "_spawn", lambda self, target, *args: spawned.append(args))
    config = DistributeConfig(dispatcher_address="127.0.0.1:1", rpc_timeout_ms=200)
    stream = RemoteStream(Pipeline.range(0, 4).build(), config)
    stream.job_id, stream.client_id = 1, 1
    update = JobUpdate(job_id=1, workers=[WorkerEndpoint(worker_id=5, address="127.0.0.1:1")])
    try:
        stream.handle_job_update(update)
        first = stream.channels[5]
        stream._retire(5, first, ConnectionLost("connection reset"))
        assert stream.retired_workers == {5}
        stream.handle_job_update(update)
        assert stream.retired_workers == set()
        assert stream.channels[5] is not first
        assert spawned == [(5,), (5,)]
        # A late failure on the replaced channel leaves the new one alone.
        stream._retire(5, first, ConnectionLost("late"))
        assert stream.retired_workers == set()
    finally:
        stream.close()


def test_worker_restarted_on_the_same_port_keeps_serving(start_workers, client_options):
    (worker,) = start_workers(1)
    port = int(worker.address.rsplit(":", 1)[1])
    stream = distribute(Pipeline.range(0, 10**9).batch(2), buffer_capacity=2, **client_options)
    try:
        assert stream.next_batch(timeout=10).keys == (0, 1)
        worker.stop()
        (restarted,) = start_workers(1, port=port)
        assert restarted.worker_id == worker.worker_id
        # The restarted worker runs the pipeline from its start again.
        for _ in range(1000):
            if stream.next_batch(timeout=10).keys == (0, 1):
                break
        else:
            pytest.fail("no batch from the restarted worker")
        assert worker.worker_id not in stream.retired_workers
    finally:
        stream.close()
