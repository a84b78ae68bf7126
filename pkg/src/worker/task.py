# src/worker/task.py
"""
Task runtimes: one per (worker, job).

A background producer thread pulls the instantiated graph and hands batches
to the serving side, which depends on the job:

  * independent: a bounded FIFO; each request pops one batch.
  * shared: a sliding-window cache with a read pointer per client.
  * coordinated: per-bucket queues and prepared rounds.

Where the producer's elements come from depends on the sharding policy: OFF
reads the whole dataset in a worker-local order, DYNAMIC pulls splits from
the dispatcher, STATIC reads the shards listed in the task.
"""

import logging
import queue
import random
import threading
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from src.core.errors import (
    ConnectionLost,
    CorruptRecord,
    DataServiceError,
    GraphInstantiationFailure,
    IoFailure,
    MalformedSpec,
    RpcTimeout,
)
from src.data_processing.records import read_records
from src.data_processing.shards import FILE, ShardSpec, enumerate_shards
from src.dispatcher.state import DYNAMIC, STATIC
from src.pipeline.elements import END_OF_DATA, PENDING, Batch, Element, Window
from src.pipeline.engine import ElementStream, instantiate, mix_seed
from src.pipeline.functions import FunctionTable
from src.pipeline.graph import SOURCE_RECORDS, DatasetGraph, deserialize_graph
from src.wire.messages import TaskDef, TaskProgress
from src.worker.cache import CacheSnapshot, SlidingWindowCache
from src.worker.coordinated import RoundRobinState

logger = logging.getLogger(__name__)

INDEPENDENT = "independent"
SHARED = "shared"
COORDINATED = "coordinated"

# fetch(completed_shard_id) -> (shard or None, end_of_splits)
SplitFetcher = Callable[[Optional[int]], Tuple[Optional[ShardSpec], bool]]

_POLL_S = 0.05
_MAX_BACKOFF_S = 1.0
# Rounds a coordinated task prepares ahead of its turn.
LOOKAHEAD_ROUNDS = 2


def _read_shard(shard: ShardSpec) -> Iterator[Element]:
    try:
        yield from read_records(shard)
    except (CorruptRecord, IoFailure) as e:
        logger.error(f"Aborting shard {shard.shard_id}: {e}")


class ShardListSource:
    """Re-iterable source over a fixed shard list; a damaged shard is abandoned."""

    def __init__(self, shards: Sequence[ShardSpec]):
        self.shards = list(shards)

    def __iter__(self) -> Iterator[Element]:
        for shard in self.shards:
            yield from _read_shard(shard)


class SplitSource:
    """
    Pulls splits from the dispatcher until it reports the end of splits.

    While the dispatcher is unreachable the source keeps retrying with
    backoff; the task keeps serving what it already buffered.
    """

    def __init__(self, fetch: SplitFetcher, stop: threading.Event):
        self.fetch = fetch
        self.stop = stop
        self.current: Optional[ShardSpec] = None
        self.processed = 0

    def __iter__(self) -> Iterator[Element]:
        completed: Optional[int] = None
        backoff = _POLL_S
        while not self.stop.is_set():
            try:
                shard, end = self.fetch(completed)
            except (ConnectionLost, RpcTimeout) as e:
                logger.warning(f"Split request failed ({e}); retrying in {backoff:.2f}s.")
                self.stop.wait(backoff)
                backoff = min(backoff * 2, _MAX_BACKOFF_S)
                continue
            backoff = _POLL_S
            # The dispatcher recorded the completion; never report it twice.
            completed = None
            if end:
                return
            if shard is None:
                self.stop.wait(_POLL_S)
                continue
            self.current = shard
            yield from _read_shard(shard)
            self.processed += 1
            completed = shard.shard_id
            self.current = None


def as_batches(item: Any) -> List[Batch]:
    """Normalizes a pipeline output item into servable batches."""
    if isinstance(item, Batch):
        return [item]
    if isinstance(item, Element):
        return [Batch.of([item])]
    if isinstance(item, Window):
        return list(item.batches)
    raise MalformedSpec(f"pipeline produced a {type(item).__name__}, which cannot be served")


class TaskRuntime:
    """
    Base runtime: owns the graph, the source binding and the producer thread.

    Args:
        task: Task definition received from the dispatcher.
        worker_id: Id of the hosting worker; seeds worker-local orders.
        fetch_split: Split fetcher for DYNAMIC jobs.
        buffer_batches: Bound of the produced-but-unserved buffer.
        window_batches: Sliding window size for shared jobs.
        functions: Function table for graph validation and execution.
    """

    mode = INDEPENDENT

    def __init__(
        self,
        task: TaskDef,
        worker_id: int,
        fetch_split: Optional[SplitFetcher] = None,
        buffer_batches: int = 8,
        window_batches: int = 16,
        functions: Optional[FunctionTable] = None,
    ):
        self.task = task
        self.job_id = task.job_id
        self.worker_id = worker_id
        self.fetch_split = fetch_split
        self.buffer_batches = buffer_batches
        self.window_batches = window_batches
        self.functions = functions
        self.produced = 0
        self.failed: Optional[str] = None
        self.split_source: Optional[SplitSource] = None
        self._stop = threading.Event()
        self._exhausted = threading.Event()
        self._thread: Optional[threading.Thread] = None
        try:
            self.graph: DatasetGraph = deserialize_graph(task.graph, functions)
        except DataServiceError as e:
            raise GraphInstantiationFailure(f"job {task.job_id}: {e}") from e

    # --- source binding ---
    @property
    def seed(self) -> int:
        if self.task.policy in (DYNAMIC, STATIC):
            return self.task.seed
        # OFF: every worker visits the data in its own order.
        return mix_seed(self.task.seed, self.worker_id)

    def _source(self) -> Optional[Iterable[Element]]:
        if self.task.policy == DYNAMIC:
            if self.fetch_split is None:
                raise GraphInstantiationFailure(f"job {self.job_id} is DYNAMIC but no split fetcher is bound")
            self.split_source = SplitSource(self.fetch_split, self._stop)
            return self.split_source
        if self.task.policy == STATIC:
            return ShardListSource(self.task.shards)
        params = self.graph.source.params
        if params["type"] == SOURCE_RECORDS:
            shards = enumerate_shards(params["dataset_dir"], FILE)
            random.Random(self.seed).shuffle(shards)
            return ShardListSource(shards)
        return None

    def _open_stream(self) -> ElementStream:
        try:
            return instantiate(self.graph, source=self._source(), seed=self.seed, functions=self.functions)
        except DataServiceError as e:
            raise GraphInstantiationFailure(f"job {self.job_id}: {e}") from e

    # --- lifecycle ---
    def start(self) -> "TaskRuntime":
        self._thread = threading.Thread(target=self._run, name=f"task-{self.job_id}", daemon=True)
        self._thread.start()
        logger.info(f"Started {self.mode} task for job {self.job_id} ({self.task.policy}).")
        return self

    def _run(self) -> None:
        try:
            self._produce()
        except Exception as e:
            self.failed = repr(e)
            logger.error(f"Task for job {self.job_id} failed: {e!r}", exc_info=True)
        finally:
            self._exhausted.set()
            self._on_exhausted()

    def _pass(self) -> int:
        """Runs one pass of the stream; returns the number of batches offered."""
        offered = 0
        with self._open_stream() as stream:
            for item in stream:
                for batch in as_batches(item):
                    if not self._offer(batch):
                        return offered
                    offered += 1
                    self.produced += 1
                if self._stop.is_set():
                    break
        return offered

    def _produce(self) -> None:
        self._pass()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=2.0)

    # --- mode hooks ---
    def _offer(self, batch: Batch) -> bool:
        raise NotImplementedError

    def _on_exhausted(self) -> None:
        pass

    @property
    def done(self) -> bool:
        raise NotImplementedError

    def get_element(self, client_id: int) -> Any:
        raise NotImplementedError

    def get_element_coordinated(self, consumer_index: int, round_index: int) -> Any:
        raise MalformedSpec(f"job {self.job_id} is not read in coordinated mode")

    def cache_stats(self) -> CacheSnapshot:
        return CacheSnapshot(window_floor=0, next_seq=self.produced, produced=self.produced)

    def finished_clients(self) -> List[int]:
        return []

    def progress(self) -> TaskProgress:
        return TaskProgress(
            job_id=self.job_id,
            produced=self.produced,
            done=self.done,
            failed=self.failed,
            finished_clients=self.finished_clients(),
        )


class IndependentTask(TaskRuntime):
    """Clients of the job split the worker's output between them."""

    mode = INDEPENDENT

    def __init__(self, *args: Any, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.buffer: "queue.Queue[Batch]" = queue.Queue(maxsize=self.buffer_batches)

    def _offer(self, batch: Batch) -> bool:
        while not self._stop.is_set():
            try:
                self.buffer.put(batch, timeout=_POLL_S)
                return True
            except queue.Full:
                continue
        return False

    def get_element(self, client_id: int) -> Any:
        try:
            return self.buffer.get_nowait()
        except queue.Empty:
            pass
        if self._exhausted.is_set():
            try:
                return self.buffer.get_nowait()
            except queue.Empty:
                return END_OF_DATA
        return PENDING

    @property
    def done(self) -> bool:
        return self._exhausted.is_set() and self.buffer.empty()


class SharedTask(TaskRuntime):
    """
    Clients read one production sequence through a sliding-window cache.

    Each client needs one full pass counted from where it joined. When the
    source is exhausted and a client at the front still lacks part of its
    pass, production restarts with a fresh, identical pass.
    """

    mode = SHARED

    def __init__(self, *args: Any, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.cache = SlidingWindowCache(self.window_batches)
        self.ready: "queue.Queue[Batch]" = queue.Queue(maxsize=self.buffer_batches)
        self.pass_len: Optional[int] = None
        self.passes = 0
        self._start: Dict[int, int] = {}
        self._pass_exhausted = False
        self._final = False
        self._restart = threading.Event()
        self._lock = threading.Lock()

    def _offer(self, batch: Batch) -> bool:
        while not self._stop.is_set():
            try:
                self.ready.put(batch, timeout=_POLL_S)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        while not self._stop.is_set():
            offered = self._pass()
            if self._stop.is_set():
                return
            with self._lock:
                self.passes += 1
                if self.pass_len is None:
                    self.pass_len = offered
                if offered == 0:
                    self._final = True
                self._pass_exhausted = True
            if self._final:
                return
            while not self._restart.wait(_POLL_S):
                if self._stop.is_set():
                    return
            self._restart.clear()
            logger.info(f"Job {self.job_id}: restarting production for a client that joined late.")

    def _next_produced(self) -> Any:
        try:
            return self.ready.get_nowait()
        except queue.Empty:
            pass
        if not self._pass_exhausted:
            return PENDING
        if self._final or self._stop.is_set():
            return END_OF_DATA
        self._pass_exhausted = False
        self._restart.set()
        return PENDING

    def _client_done(self, client_id: int) -> bool:
        return self.pass_len is not None and self.cache.pointer(client_id) - self._start[client_id] >= self.pass_len

    def get_element(self, client_id: int) -> Any:
        with self._lock:
            if client_id not in self._start:
                self._start[client_id] = self.cache.pointer(client_id)
                logger.debug(f"Job {self.job_id}: client {client_id} joined at sequence {self._start[client_id]}.")
            if self._client_done(client_id):
                return END_OF_DATA
            return self.cache.read(client_id, self._next_produced)

    def cache_stats(self) -> CacheSnapshot:
        return self.cache.snapshot()

    def finished_clients(self) -> List[int]:
        with self._lock:
            return sorted(c for c in self._start if self._client_done(c))

    @property
    def done(self) -> bool:
        with self._lock:
            if self._final and self.ready.empty():
                return True
            return (
                self._pass_exhausted
                and self.ready.empty()
                and bool(self._start)
                and all(self._client_done(c) for c in self._start)
            )


class CoordinatedTask(TaskRuntime):
    """Serves prepared rounds of m same-bucket batches on this worker's turns."""

    mode = COORDINATED

    def __init__(self, *args: Any, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.schedule = RoundRobinState(
            num_workers=self.task.num_workers,
            num_consumers=self.task.num_consumers,
            my_index=self.task.worker_index,
        )
        self.capacity = max(self.buffer_batches, self.task.num_consumers)
        self._cond = threading.Condition()

    def _offer(self, batch: Batch) -> bool:
        with self._cond:
            self.schedule.add(batch)
            while self.schedule.prepared_ahead < LOOKAHEAD_ROUNDS and self.schedule.prepare() is not None:
                pass
            while (
                not self._stop.is_set()
                and self.schedule.queued >= self.capacity
                and self.schedule.prepared_ahead >= LOOKAHEAD_ROUNDS
            ):
                self._cond.wait(_POLL_S)
            return not self._stop.is_set()

    def _on_exhausted(self) -> None:
        with self._cond:
            self.schedule.finish()
            self._cond.notify_all()

    def get_element(self, client_id: int) -> Any:
        raise MalformedSpec(f"job {self.job_id} is coordinated; requests need a consumer index and round")

    def get_element_coordinated(self, consumer_index: int, round_index: int) -> Any:
        with self._cond:
            item = self.schedule.get(round_index, consumer_index)
            self._cond.notify_all()
            return item

    @property
    def done(self) -> bool:
        with self._cond:
            return self._exhausted.is_set() and not self.schedule.rounds and self.schedule.queued == 0


def run_task(
    task: TaskDef,
    worker_id: int,
    fetch_split: Optional[SplitFetcher] = None,
    buffer_batches: int = 8,
    window_batches: int = 16,
    functions: Optional[FunctionTable] = None,
) -> TaskRuntime:
    """
    Creates and starts the runtime matching the task's read mode.

    Raises:
        GraphInstantiationFailure: the graph does not deserialize or validate.
    """
    if task.num_consumers is not None:
        cls = CoordinatedTask
    elif task.sharing:
        cls = SharedTask
    else:
        cls = IndependentTask
    runtime = cls(task, worker_id, fetch_split, buffer_batches, window_batches, functions)
    return runtime.start()
