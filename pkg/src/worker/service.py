# src/worker/service.py
"""
Worker process logic.

A `Worker` registers with the dispatcher, runs one task runtime per job,
heartbeats task progress and resource telemetry, and serves GetElement and
CacheStats requests. It keeps no state on disk: a restarted worker simply
registers again and receives its tasks back.

A worker started with `local=True` is not served over the network; clients
in the same process reach it through `LOCAL_WORKERS` by its "local://"
address and call it directly.
"""

import logging
import threading
import uuid
from typing import Any, Dict, List, Optional, Tuple

import psutil

from src.core.errors import (
    ConnectionLost,
    DataServiceError,
    GraphInstantiationFailure,
    RpcTimeout,
    UnknownJob,
)
from src.data_processing.shards import ShardSpec
from src.pipeline.elements import END_OF_DATA, PENDING, Batch
from src.pipeline.functions import FunctionTable
from src.wire.messages import (
    CacheStatsRequest,
    CacheStatsResponse,
    ElementResult,
    GetElementRequest,
    GetSplitRequest,
    HeartbeatRequest,
    RegisterWorkerRequest,
    TaskDef,
    TaskProgress,
)
from src.wire.transport import RpcClient, RpcServer
from src.worker.cache import CacheSnapshot
from src.worker.task import TaskRuntime, run_task

logger = logging.getLogger(__name__)

LOCAL_SCHEME = "local://"
LOCAL_WORKERS: Dict[str, "Worker"] = {}


def process_telemetry() -> Tuple[float, int]:
    """CPU seconds consumed and resident memory of this process."""
    proc = psutil.Process()
    times = proc.cpu_times()
    return times.user + times.system, proc.memory_info().rss


def to_result(item: Any, round_index: Optional[int] = None) -> ElementResult:
    if isinstance(item, Batch):
        return ElementResult(status="batch", batch=item, round=round_index)
    if item is PENDING:
        return ElementResult(status="pending", round=round_index)
    if item is END_OF_DATA:
        return ElementResult(status="end_of_job", round=round_index)
    raise TypeError(f"cannot serve {item!r}")


class Worker:
    """
    Args:
        dispatcher_address: "host:port" of the dispatcher.
        host: Interface to serve on.
        port: Port to serve on; 0 picks an ephemeral port.
        buffer_batches: Per-task produced-batch buffer bound.
        window_batches: Sliding window size of shared tasks.
        heartbeat_interval_ms: Heartbeat period.
        compression: Codec requested on outgoing connections.
        local: Serve in-process only, under a "local://" address.
        functions: Function table used to validate and run graphs.
    """

    def __init__(
        self,
        dispatcher_address: str,
        host: str = "127.0.0.1",
        port: int = 0,
        buffer_batches: int = 8,
        window_batches: int = 16,
        heartbeat_interval_ms: int = 1000,
        compression: str = "none",
        rpc_timeout_ms: int = 10000,
        handler_threads: int = 16,
        local: bool = False,
        functions: Optional[FunctionTable] = None,
    ):
        self.dispatcher_address = dispatcher_address
        self.buffer_batches = buffer_batches
        self.window_batches = window_batches
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.rpc_timeout = rpc_timeout_ms / 1000.0
        self.local = local
        self.functions = functions
        self.worker_id: Optional[int] = None
        self.tasks: Dict[int, TaskRuntime] = {}
        self.failed_tasks: Dict[int, str] = {}
        # Last cache statistics of tasks stopped after their job completed.
        self.finished_stats: Dict[int, CacheSnapshot] = {}
        self._dispatcher = RpcClient(dispatcher_address, timeout=self.rpc_timeout, compression=compression)
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._heartbeat_thread: Optional[threading.Thread] = None
        self.server: Optional[RpcServer] = None
        if local:
            self._address = f"{LOCAL_SCHEME}{uuid.uuid4().hex[:12]}"
        else:
            self.server = RpcServer(
                {GetElementRequest: self.handle_get_element, CacheStatsRequest: self.handle_cache_stats},
                host=host,
                port=port,
                handler_threads=handler_threads,
                name="worker",
            )
            self._address = ""

    @property
    def address(self) -> str:
        return self._address

    # --- lifecycle ---
    def start(self) -> "Worker":
        if self.server is not None:
            self.server.start()
            self._address = self.server.address
        else:
            LOCAL_WORKERS[self._address] = self
        self._stop.clear()
        try:
            self.register()
        except (ConnectionLost, RpcTimeout) as e:
            logger.warning(f"Dispatcher at {self.dispatcher_address} unreachable ({e}); will retry.")
        self._heartbeat_thread = threading.Thread(target=self._heartbeat_loop, name="worker-heartbeat", daemon=True)
        self._heartbeat_thread.start()
        return self

    def stop(self) -> None:
        """Stops serving and drops every task; buffered batches are lost."""
        self._stop.set()
        if self._heartbeat_thread is not None:
            self._heartbeat_thread.join(timeout=5)
        with self._lock:
            tasks, self.tasks = list(self.tasks.values()), {}
        for task in tasks:
            task.stop()
        if self.server is not None:
            self.server.stop()
        LOCAL_WORKERS.pop(self._address, None)
        self._dispatcher.close()
        logger.info(f"Worker {self.worker_id} at {self._address} stopped.")

    # --- dispatcher interaction ---
    def register(self) -> int:
        response = self._dispatcher.call(RegisterWorkerRequest(address=self._address))
        self.worker_id = response.worker_id
        logger.info(f"Registered as worker {self.worker_id} at {self._address} with {len(response.tasks)} task(s).")
        # A re-registration hands out fresh task definitions; old runtimes hold stale splits.
        with self._lock:
            stale, self.tasks = list(self.tasks.values()), {}
        for task in stale:
            task.stop()
        for task_def in response.tasks:
            self._start_task(task_def)
        return self.worker_id

    def _fetcher(self, job_id: int):
        def fetch(completed_shard_id: Optional[int]) -> Tuple[Optional[ShardSpec], bool]:
            response = self._dispatcher.call(
                GetSplitRequest(job_id=job_id, worker_id=self.worker_id, completed_shard_id=completed_shard_id)
            )
            return response.shard, response.end_of_splits

        return fetch

    def _start_task(self, task_def: TaskDef) -> None:
        with self._lock:
            if task_def.job_id in self.tasks or self._stop.is_set():
                return
            try:
                self.tasks[task_def.job_id] = run_task(
                    task_def,
                    self.worker_id,
                    fetch_split=self._fetcher(task_def.job_id),
                    buffer_batches=self.buffer_batches,
                    window_batches=self.window_batches,
                    functions=self.functions,
                )
            except GraphInstantiationFailure as e:
                self.failed_tasks[task_def.job_id] = e.detail
                logger.error(f"Cannot run job {task_def.job_id}: {e}")

    def _stop_task(self, job_id: int) -> None:
        with self._lock:
            task = self.tasks.pop(job_id, None)
        if task is not None:
            task.stop()
            self.finished_stats[job_id] = task.cache_stats()
            logger.info(f"Job {job_id} completed; task stopped.")

    def progress(self) -> List[TaskProgress]:
        with self._lock:
            reports = [task.progress() for task in self.tasks.values()]
            reports.extend(TaskProgress(job_id=j, failed=reason) for j, reason in self.failed_tasks.items())
        return reports

    def heartbeat(self) -> None:
        if self.worker_id is None:
            self.register()
            return
        cpu_seconds, rss = process_telemetry()
        response = self._dispatcher.call(
            HeartbeatRequest(worker_id=self.worker_id, tasks=self.progress(), cpu_seconds=cpu_seconds, rss_bytes=rss)
        )
        if response.reregister:
            logger.warning(f"Dispatcher does not know worker {self.worker_id}; re-registering.")
            self.register()
            return
        for task_def in response.new_tasks:
            self._start_task(task_def)
        for job_id in response.completed_jobs:
            self._stop_task(job_id)
            self.failed_tasks.pop(job_id, None)

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_interval_ms / 1000.0):
            try:
                self.heartbeat()
            except (ConnectionLost, RpcTimeout) as e:
                # Keep serving active tasks while the dispatcher is away.
                logger.warning(f"Heartbeat to {self.dispatcher_address} failed: {e}")
            except DataServiceError as e:
                logger.error(f"Heartbeat rejected: {e}")

    # --- serving ---
    def _task(self, job_id: int) -> TaskRuntime:
        with self._lock:
            task = self.tasks.get(job_id)
        if task is None:
            raise UnknownJob(f"worker {self.worker_id} has no task for job {job_id}")
        return task

    def get_element(
        self,
        job_id: int,
        client_id: int,
        consumer_index: Optional[int] = None,
        round_index: Optional[int] = None,
    ) -> ElementResult:
        task = self._task(job_id)
        if consumer_index is not None and round_index is not None:
            return to_result(task.get_element_coordinated(consumer_index, round_index), round_index)
        return to_result(task.get_element(client_id))

    def cache_stats(self, job_id: int) -> CacheStatsResponse:
        try:
            snapshot = self._task(job_id).cache_stats()
        except UnknownJob:
            snapshot = self.finished_stats.get(job_id)
            if snapshot is None:
                raise
        cpu_seconds, rss = process_telemetry()
        return CacheStatsResponse(
            job_id=job_id,
            window_floor=snapshot.window_floor,
            next_seq=snapshot.next_seq,
            pointers={str(c): p for c, p in snapshot.pointers.items()},
            evictions=snapshot.evictions,
            produced=snapshot.produced,
            cpu_seconds=cpu_seconds,
            rss_bytes=rss,
        )

    def handle_get_element(self, request: GetElementRequest) -> ElementResult:
        return self.get_element(request.job_id, request.client_id, request.consumer_index, request.round)

    def handle_cache_stats(self, request: CacheStatsRequest) -> CacheStatsResponse:
        return self.cache_stats(request.job_id)
