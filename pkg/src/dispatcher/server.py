# src/dispatcher/server.py
"""RPC front end of the dispatcher plus its liveness sweep."""

import logging
import threading
from pathlib import Path
from typing import Optional, Union

from src.dispatcher.journal import Journal
from src.dispatcher.service import Dispatcher, recover
from src.wire.messages import (
    ClientHeartbeatRequest,
    GetSplitRequest,
    GetSplitResponse,
    GetStateRequest,
    HeartbeatRequest,
    HeartbeatResponse,
    JobUpdate,
    ListTasksRequest,
    ListTasksResponse,
    RegisterJobRequest,
    RegisterJobResponse,
    RegisterWorkerRequest,
    RegisterWorkerResponse,
    StateDump,
)
from src.wire.transport import RpcServer

logger = logging.getLogger(__name__)


class DispatcherServer:
    """
    Serves a `Dispatcher` over the wire protocol.

    A background thread runs the liveness sweep every heartbeat interval.
    """

    def __init__(
        self,
        dispatcher: Dispatcher,
        host: str = "127.0.0.1",
        port: int = 0,
        heartbeat_interval_ms: int = 1000,
        handler_threads: int = 16,
    ):
        self.dispatcher = dispatcher
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.rpc = RpcServer(
            {
                RegisterWorkerRequest: self._register_worker,
                RegisterJobRequest: self._register_job,
                GetSplitRequest: self._get_split,
                HeartbeatRequest: self._heartbeat,
                ListTasksRequest: self._list_tasks,
                ClientHeartbeatRequest: self._client_heartbeat,
                GetStateRequest: self._get_state,
            },
            host=host,
            port=port,
            handler_threads=handler_threads,
            name="dispatcher",
        )
        self._stop = threading.Event()
        self._sweeper: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        return self.rpc.address

    def start(self) -> "DispatcherServer":
        self.rpc.start()
        self._stop.clear()
        self._sweeper = threading.Thread(target=self._sweep_loop, name="dispatcher-liveness", daemon=True)
        self._sweeper.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.rpc.stop()
        if self._sweeper is not None:
            self._sweeper.join(timeout=5)
        self.dispatcher.close()

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_interval_ms / 1000.0):
            try:
                self.dispatcher.check_liveness()
            except Exception:
                logger.error("Liveness sweep failed.", exc_info=True)

    # --- handlers ---
    def _register_worker(self, request: RegisterWorkerRequest) -> RegisterWorkerResponse:
        worker_id, tasks = self.dispatcher.register_worker(request.address)
        return RegisterWorkerResponse(worker_id=worker_id, tasks=tasks)

    def _register_job(self, request: RegisterJobRequest) -> RegisterJobResponse:
        handle = self.dispatcher.register_job(
            graph=request.graph,
            policy=request.policy,
            job_name=request.job_name,
            num_consumers=request.num_consumers,
            sharing=request.sharing,
            granularity=request.granularity,
            shards_per_worker_hint=request.shards_per_worker_hint,
            num_epochs=request.num_epochs,
            seed=request.seed,
        )
        return RegisterJobResponse(
            job_id=handle.job_id, client_id=handle.client_id, workers=handle.workers, num_workers=handle.num_workers
        )

    def _get_split(self, request: GetSplitRequest) -> GetSplitResponse:
        result = self.dispatcher.get_split(request.job_id, request.worker_id, request.completed_shard_id)
        return GetSplitResponse(shard=result.shard, end_of_splits=result.end_of_splits, epoch=result.epoch)

    def _heartbeat(self, request: HeartbeatRequest) -> HeartbeatResponse:
        directives = self.dispatcher.heartbeat(
            request.worker_id, request.tasks, request.cpu_seconds, request.rss_bytes
        )
        return HeartbeatResponse(
            new_tasks=directives.new_tasks,
            completed_jobs=directives.completed_jobs,
            reregister=directives.reregister,
        )

    def _list_tasks(self, request: ListTasksRequest) -> ListTasksResponse:
        return ListTasksResponse(tasks=self.dispatcher.list_tasks(request.worker_id))

    def _client_heartbeat(self, request: ClientHeartbeatRequest) -> JobUpdate:
        return self.dispatcher.client_heartbeat(request.job_id, request.client_id)

    def _get_state(self, request: GetStateRequest) -> StateDump:
        return StateDump(state=self.dispatcher.canonical_dump())


def start_dispatcher(
    journal_path: Union[str, Path],
    host: str = "127.0.0.1",
    port: int = 0,
    heartbeat_interval_ms: int = 1000,
    worker_timeout_ms: int = 3000,
    fsync: bool = True,
    handler_threads: int = 16,
) -> DispatcherServer:
    """
    Recovers a dispatcher from the journal at `journal_path` and starts serving it.

    Raises:
        CorruptJournal: the journal is damaged before its final record.
    """
    dispatcher = recover(Journal(journal_path, fsync=fsync), worker_timeout_ms=worker_timeout_ms)
    server = DispatcherServer(
        dispatcher,
        host=host,
        port=port,
        heartbeat_interval_ms=heartbeat_interval_ms,
        handler_threads=handler_threads,
    ).start()
    logger.info(f"Dispatcher serving on {server.address} with journal '{journal_path}'.")
    return server
