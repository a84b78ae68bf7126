# src/client/stream.py
"""
Client side of a distributed pipeline.

`distribute` registers (or joins) a job and returns a `RemoteStream`. The
stream runs background fetchers against the job's workers and a heartbeat
thread that polls the dispatcher for worker pool changes and job
completion. `next_batch` is single-consumer.
"""

import logging
import queue
import threading
import time
from typing import Any, Dict, List, Optional, Set, Union

from src.client.config import DistributeConfig
from src.core.errors import (
    AllWorkersLost,
    ConfigError,
    ConnectionLost,
    DataServiceError,
    DispatcherUnreachable,
    RoundExpired,
    RpcTimeout,
    UnknownJob,
)
from src.pipeline.elements import END_OF_DATA, Batch
from src.pipeline.graph import DatasetGraph, Pipeline, build_graph
from src.wire.messages import (
    ClientHeartbeatRequest,
    ElementResult,
    GetElementRequest,
    JobUpdate,
    RegisterJobRequest,
    WorkerEndpoint,
)
from src.wire.transport import RpcClient
from src.worker.service import LOCAL_SCHEME, LOCAL_WORKERS

logger = logging.getLogger(__name__)

END_OF_JOB = END_OF_DATA

BACKOFF_BASE_S = 0.010
BACKOFF_CAP_S = 0.500
_POLL_S = 0.05


class WorkerChannel:
    """Calls one worker, over the wire or by direct call for in-process workers."""

    def __init__(self, endpoint: WorkerEndpoint, config: DistributeConfig):
        self.endpoint = endpoint
        self.local = endpoint.address.startswith(LOCAL_SCHEME)
        self._rpc: Optional[RpcClient] = None
        if not self.local:
            self._rpc = RpcClient(
                endpoint.address,
                timeout=config.rpc_timeout_ms / 1000.0,
                compression="lz4" if config.compression else "none",
                latency_ms=config.latency_ms,
            )

    def get_element(
        self,
        job_id: int,
        client_id: int,
        consumer_index: Optional[int] = None,
        round_index: Optional[int] = None,
    ) -> ElementResult:
        if self.local:
            worker = LOCAL_WORKERS.get(self.endpoint.address)
            if worker is None:
                raise ConnectionLost(f"local worker {self.endpoint.address} is gone")
            return worker.get_element(job_id, client_id, consumer_index, round_index)
        return self._rpc.call(
            GetElementRequest(job_id=job_id, client_id=client_id, consumer_index=consumer_index, round=round_index)
        )

    def close(self) -> None:
        if self._rpc is not None:
            self._rpc.close()


class RemoteStream:
    """
    Blocking batch iterator over a distributed job.

    Uncoordinated streams keep a bounded FIFO filled by
    `fetch_parallelism` fetchers per worker. Coordinated streams keep one
    slot per round; round r is fetched only from the worker with index
    r mod n and consumed strictly in round order.
    """

    def __init__(self, graph: DatasetGraph, config: DistributeConfig):
        self.graph = graph
        self.config = config
        self.job_id: Optional[int] = None
        self.client_id: Optional[int] = None
        self.batches_consumed = 0
        self.ended_workers: Set[int] = set()
        self.retired_workers: Set[int] = set()
        self.finished_workers: Set[int] = set()
        self.job_done = False
        self.channels: Dict[int, WorkerChannel] = {}
        self._fetchers: List[threading.Thread] = []
        self._buffer: "queue.Queue[Batch]" = queue.Queue(maxsize=config.buffer_capacity)
        self._slots: Dict[int, Batch] = {}
        self._skipped: Set[int] = set()
        self.rounds_skipped = 0
        self._round = 0
        self._num_workers = 0
        self._owners: Dict[int, int] = {}
        self._end_round: Dict[int, int] = {}
        self._empty_since: Optional[float] = None
        self._lock = threading.Condition()
        self._stop = threading.Event()
        self._dispatcher = RpcClient(
            config.dispatcher_address,
            timeout=config.rpc_timeout_ms / 1000.0,
            compression="lz4" if config.compression else "none",
        )
        self._heartbeat_thread: Optional[threading.Thread] = None

    # --- setup ---
    def _accepts(self, endpoint: WorkerEndpoint) -> bool:
        local = endpoint.address.startswith(LOCAL_SCHEME)
        if self.config.read_sources == "local":
            return local
        if self.config.read_sources == "remote":
            return not local
        return True

    def start(self) -> "RemoteStream":
        if self.config.read_sources == "local" and not LOCAL_WORKERS:
            raise ConfigError("local reads need an in-process worker")
        request = RegisterJobRequest(
            graph=self.graph.serialize(),
            policy=self.config.sharding_policy,
            job_name=self.config.job_name,
            num_consumers=self.config.num_consumers,
            sharing=self.config.sharing,
            granularity=self.config.granularity,
            shards_per_worker_hint=self.config.shards_per_worker_hint,
            num_epochs=self.config.num_epochs,
            seed=self.config.seed,
        )
        try:
            response = self._dispatcher.call(request)
        except (ConnectionLost, RpcTimeout) as e:
            raise DispatcherUnreachable(f"dispatcher at {self.config.dispatcher_address}: {e}") from e
        self.job_id = response.job_id
        self.client_id = response.client_id
        if self.config.coordinated:
            self._num_workers = response.num_workers
        logger.info(
            f"Client {self.client_id} reading job {self.job_id} from {len(response.workers)} worker(s)."
        )
        self.handle_job_update(JobUpdate(job_id=self.job_id, workers=response.workers))
        self._heartbeat_thread = threading.Thread(target=self._heartbeat_loop, name="client-heartbeat", daemon=True)
        self._heartbeat_thread.start()
        return self

    # --- worker pool ---
    def handle_job_update(self, update: JobUpdate) -> None:
        """
        Applies a worker pool update: new workers get fetchers, vanished
        workers are retired (their buffered batches stay consumable), and a
        retired worker that is listed again gets a fresh channel and fetchers.
        Applying the same update twice changes nothing.
        """
        with self._lock:
            self.job_done = self.job_done or update.job_done
            self.finished_workers.update(update.finished_workers)
            current = {w.worker_id: w for w in update.workers if self._accepts(w)}
            for worker_id, endpoint in current.items():
                if worker_id in self.retired_workers and worker_id not in self.ended_workers:
                    logger.info(f"Worker {worker_id} rejoined job {self.job_id} at {endpoint.address}.")
                    self.retired_workers.discard(worker_id)
                    self.channels.pop(worker_id).close()
                if worker_id in self.channels or worker_id in self.retired_workers:
                    continue
                self.channels[worker_id] = WorkerChannel(endpoint, self.config)
                if self.config.coordinated:
                    if endpoint.worker_index is None or endpoint.worker_index >= self._num_workers:
                        # The worker count of a coordinated job is fixed when it registers.
                        logger.warning(f"Ignoring worker {worker_id}: not part of the coordinated round robin.")
                        continue
                    self._owners[endpoint.worker_index] = worker_id
                    self._spawn(self._coordinated_fetch, worker_id, endpoint.worker_index)
                else:
                    for _ in range(self.config.fetch_parallelism):
                        self._spawn(self._fetch, worker_id)
            for worker_id in list(self.channels):
                if worker_id not in current and worker_id not in self.retired_workers:
                    self.retired_workers.add(worker_id)
                    logger.info(f"Worker {worker_id} left job {self.job_id}; retiring its fetchers.")
            live = [w for w in self.channels if w not in self.retired_workers and w not in self.ended_workers]
            if live or self.job_done:
                self._empty_since = None
            elif self._empty_since is None:
                self._empty_since = time.monotonic()
            self._lock.notify_all()

    def _spawn(self, target, *args: Any) -> None:
        thread = threading.Thread(target=target, args=args, name=f"fetch-{self.job_id}-{args[0]}", daemon=True)
        self._fetchers.append(thread)
        thread.start()

    def _active(self, worker_id: int, channel: WorkerChannel) -> bool:
        return (
            not self._stop.is_set()
            and worker_id not in self.retired_workers
            and self.channels.get(worker_id) is channel
        )

    def _retire(self, worker_id: int, channel: WorkerChannel, reason: Exception) -> None:
        with self._lock:
            # A failure on a replaced channel says nothing about the rejoined worker.
            if self.channels.get(worker_id) is channel and worker_id not in self.retired_workers:
                logger.warning(f"Lost worker {worker_id} of job {self.job_id}: {reason}")
                self.retired_workers.add(worker_id)
            self._lock.notify_all()

    # --- fetchers ---
    def _mark_ended(self, worker_id: int, worker_index: Optional[int] = None, round_index: int = 0) -> None:
        with self._lock:
            self.ended_workers.add(worker_id)
            if worker_index is not None:
                self._end_round[worker_index] = round_index
            self._lock.notify_all()

    def _fetch(self, worker_id: int) -> None:
        channel = self.channels[worker_id]
        backoff = BACKOFF_BASE_S
        while self._active(worker_id, channel):
            try:
                result = channel.get_element(self.job_id, self.client_id)
            except UnknownJob:
                # The worker has not been handed its task yet, or already dropped it.
                if self.job_done:
                    self._mark_ended(worker_id)
                    return
                self._stop.wait(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)
                continue
            except (ConnectionLost, RpcTimeout) as e:
                self._retire(worker_id, channel, e)
                return
            except DataServiceError as e:
                logger.error(f"Worker {worker_id} rejected a fetch: {e}")
                self._retire(worker_id, channel, e)
                return
            if result.status == "batch":
                backoff = BACKOFF_BASE_S
                # A fetched batch is delivered even if the worker was retired meanwhile.
                while True:
                    try:
                        self._buffer.put(result.batch, timeout=_POLL_S)
                        break
                    except queue.Full:
                        if self._stop.is_set():
                            return
                continue
            if result.status == "end_of_job":
                self._mark_ended(worker_id)
                return
            self._stop.wait(backoff)
            backoff = min(backoff * 2, BACKOFF_CAP_S)

    def _coordinated_fetch(self, worker_id: int, worker_index: int) -> None:
        channel = self.channels[worker_id]
        with self._lock:
            # First owned round not yet consumed; a rejoined worker starts there.
            round_index = self._round + (worker_index - self._round) % self._num_workers
        backoff = BACKOFF_BASE_S
        while self._active(worker_id, channel):
            with self._lock:
                while self._active(worker_id, channel) and round_index >= self._round + self.config.buffer_capacity:
                    self._lock.wait(_POLL_S)
            if not self._active(worker_id, channel):
                return
            try:
                result = channel.get_element(
                    self.job_id, self.client_id, self.config.consumer_index, round_index
                )
            except UnknownJob:
                if self.job_done:
                    self._mark_ended(worker_id, worker_index, round_index)
                    return
                self._stop.wait(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)
                continue
            except RoundExpired as e:
                # The other consumers moved on past the retention horizon.
                logger.warning(f"Skipping round {round_index} of job {self.job_id}: {e}")
                with self._lock:
                    self._skipped.add(round_index)
                    self._lock.notify_all()
                round_index += self._num_workers
                continue
            except (ConnectionLost, RpcTimeout) as e:
                self._retire(worker_id, channel, e)
                return
            except DataServiceError as e:
                logger.error(f"Worker {worker_id} rejected round {round_index}: {e}")
                self._retire(worker_id, channel, e)
                return
            if result.status == "batch":
                with self._lock:
                    self._slots[round_index] = result.batch
                    self._lock.notify_all()
                round_index += self._num_workers
                backoff = BACKOFF_BASE_S
            elif result.status == "end_of_job":
                self._mark_ended(worker_id, worker_index, round_index)
                return
            else:
                self._stop.wait(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)

    # --- dispatcher polling ---
    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.config.poll_interval_ms / 1000.0):
            try:
                update = self._dispatcher.call(ClientHeartbeatRequest(job_id=self.job_id, client_id=self.client_id))
            except (ConnectionLost, RpcTimeout) as e:
                logger.debug(f"Dispatcher poll failed: {e}")
                continue
            except DataServiceError as e:
                logger.warning(f"Dispatcher rejected poll: {e}")
                continue
            self.handle_job_update(update)

    # --- consumption ---
    def _finished(self) -> bool:
        """All fetchers stopped, buffer drained, and the job is over."""
        fetchers_done = all(w in self.ended_workers or w in self.retired_workers for w in self.channels)
        ended_reported = bool(self.ended_workers) and self.ended_workers <= self.finished_workers
        return fetchers_done and self._buffer.empty() and (self.job_done or ended_reported)

    def _check_lost(self) -> None:
        if self._empty_since is None:
            return
        if (time.monotonic() - self._empty_since) * 1000.0 >= self.config.workers_lost_grace_ms:
            raise AllWorkersLost(f"job {self.job_id} has no live workers")

    def next_batch(self, timeout: Optional[float] = None) -> Union[Batch, Any]:
        """
        Returns the next batch, or END_OF_JOB once the job is exhausted.

        Raises:
            AllWorkersLost: no live worker for longer than the grace period.
            RpcTimeout: `timeout` seconds passed without a batch.
        """
        if self.config.coordinated:
            return self._next_round(timeout)
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                batch = self._buffer.get(timeout=_POLL_S)
                self.batches_consumed += 1
                return batch
            except queue.Empty:
                pass
            with self._lock:
                if self._finished():
                    return END_OF_JOB
                self._check_lost()
            if deadline is not None and time.monotonic() > deadline:
                raise RpcTimeout(f"no batch for job {self.job_id} within {timeout}s")

    def _next_round(self, timeout: Optional[float]) -> Union[Batch, Any]:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while True:
                r = self._round
                if r in self._slots:
                    batch = self._slots.pop(r)
                    self._round += 1
                    self.batches_consumed += 1
                    self._lock.notify_all()
                    return batch
                if r in self._skipped:
                    self._skipped.discard(r)
                    self._round += 1
                    self.rounds_skipped += 1
                    self._lock.notify_all()
                    continue
                owner_index = r % self._num_workers if self._num_workers else 0
                end = self._end_round.get(owner_index)
                if end is not None and r >= end:
                    return END_OF_JOB
                owner = self._owners.get(owner_index)
                if owner is not None and owner in self.retired_workers:
                    raise ConnectionLost(
                        f"worker {owner} serving rounds {owner_index} mod {self._num_workers} was lost"
                    )
                self._check_lost()
                if deadline is not None and time.monotonic() > deadline:
                    raise RpcTimeout(f"round {r} of job {self.job_id} not served within {timeout}s")
                self._lock.wait(_POLL_S)

    def __iter__(self) -> "RemoteStream":
        return self

    def __next__(self) -> Batch:
        item = self.next_batch()
        if item is END_OF_JOB:
            raise StopIteration
        return item

    def close(self) -> None:
        """Stops the heartbeat and joins every fetcher."""
        self._stop.set()
        with self._lock:
            self._lock.notify_all()
        for thread in self._fetchers:
            thread.join(timeout=2.0)
        if self._heartbeat_thread is not None:
            self._heartbeat_thread.join(timeout=2.0)
        for channel in self.channels.values():
            channel.close()
        self._dispatcher.close()

    def __enter__(self) -> "RemoteStream":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def distribute(
    graph: Union[DatasetGraph, Pipeline],
    config: Optional[DistributeConfig] = None,
    **overrides: Any,
) -> RemoteStream:
    """
    Registers or joins a job for `graph` and starts fetching.

    Raises:
        DispatcherUnreachable: the dispatcher cannot be contacted.
        PolicyMismatch: a job of the same name runs a different pipeline.
        ConfigError: the configuration is inconsistent.
    """
    if config is None:
        config = DistributeConfig.create(**overrides)
    elif overrides:
        config = DistributeConfig.create(**{**config.model_dump(), **overrides})
    if isinstance(graph, Pipeline):
        graph = build_graph(graph)
    return RemoteStream(graph, config).start()
