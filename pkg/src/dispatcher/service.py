# src/dispatcher/service.py
"""
Dispatcher control plane.

Every mutation runs under one lock and follows the same order: apply the
record to the in-memory state (which validates it), append it to the journal,
then build the reply. Nothing is acknowledged before its record is in the
journal. The dispatcher never reads or transforms data; it only hands out
graphs, tasks and shards.
"""

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Set, Tuple, Union

from src.core.errors import (
    DataServiceError,
    MalformedSpec,
    PolicyMismatch,
    UnknownJob,
    UnknownWorker,
    WrongPolicy,
)
from src.data_processing.shards import FILE, ShardSpec, enumerate_range_shards, enumerate_shards
from src.dispatcher.journal import EventType, Journal, JournalRecord, MemoryJournal
from src.dispatcher.state import (
    DYNAMIC,
    OFF,
    POLICIES,
    STATIC,
    DispatcherState,
    JobState,
    TaskInfo,
)
from src.pipeline.graph import SOURCE_RANGE, DatasetGraph, deserialize_graph
from src.wire.messages import JobUpdate, TaskDef, TaskProgress, WorkerEndpoint

logger = logging.getLogger(__name__)

Clock = Callable[[], float]


@dataclass
class JobHandle:
    job_id: int
    client_id: int
    workers: List[WorkerEndpoint]
    created: bool
    # Round-robin width of a coordinated job; 0 otherwise.
    num_workers: int = 0


@dataclass
class SplitResult:
    shard: Optional[ShardSpec]
    end_of_splits: bool
    epoch: int


@dataclass
class Directives:
    new_tasks: List[TaskDef] = field(default_factory=list)
    completed_jobs: List[int] = field(default_factory=list)
    reregister: bool = False


@dataclass
class WorkerTelemetry:
    cpu_seconds: float = 0.0
    rss_bytes: int = 0


def shards_for_graph(
    graph: DatasetGraph,
    granularity: str,
    shards_per_worker_hint: int,
    num_workers: int,
) -> List[ShardSpec]:
    """Enumerates the shards of a graph's source node."""
    params = graph.source.params
    if params["type"] == SOURCE_RANGE:
        return enumerate_range_shards(
            params["start"], params["end"], max(1, shards_per_worker_hint * max(1, num_workers))
        )
    return enumerate_shards(params["dataset_dir"], granularity, shards_per_worker_hint, max(1, num_workers))


class Dispatcher:
    """
    Args:
        journal: Durable record of state changes (`Journal` or `MemoryJournal`).
        state: Initial state, normally the replay of `journal`.
        worker_timeout_ms: Silence after which a worker is declared dead.
        clock: Monotonic clock in seconds; injectable for liveness tests.
    """

    def __init__(
        self,
        journal: Union[Journal, MemoryJournal, None] = None,
        state: Optional[DispatcherState] = None,
        worker_timeout_ms: int = 3000,
        clock: Clock = time.monotonic,
    ):
        self.journal = journal if journal is not None else MemoryJournal()
        self.state = state or DispatcherState()
        self.worker_timeout_ms = worker_timeout_ms
        self.clock = clock
        self._lock = threading.RLock()
        # Not journaled: every worker gets a fresh grace period after recovery.
        now = clock()
        self._last_seen: Dict[int, float] = {w.worker_id: now for w in self.state.live_workers()}
        self.telemetry: Dict[int, WorkerTelemetry] = {}
        # Shared jobs: (job id, worker id) -> clients that finished their pass there.
        self._finished_clients: Dict[Tuple[int, int], Set[int]] = {}

    # --- journaling ---
    def _commit(self, event: EventType, **payload: Any) -> None:
        record = JournalRecord(seq=self.state.last_seq + 1, event=event, payload=payload)
        # Handlers check their preconditions before mutating, so a rejected
        # record leaves both the state and the journal untouched.
        self.state.apply(record)
        try:
            self.journal.append(record)
        except DataServiceError:
            # The state never keeps a change the journal does not hold.
            self.state = DispatcherState.replay(self.journal.recover())
            raise

    # --- helpers ---
    def _task_def(self, job: JobState, task: TaskInfo) -> TaskDef:
        num_workers = job.num_workers if job.coordinated else max(1, len(self.state.live_tasks(job)))
        return TaskDef(
            job_id=job.job_id,
            job_name=job.job_name,
            graph=job.graph,
            policy=job.policy,
            num_consumers=job.num_consumers,
            sharing=job.sharing,
            worker_index=task.worker_index,
            num_workers=num_workers,
            shards=[job.shards[i] for i in task.shard_ids],
            seed=job.seed,
        )

    def _endpoints(self, job: JobState) -> List[WorkerEndpoint]:
        return [
            WorkerEndpoint(
                worker_id=task.worker_id,
                address=self.state.workers[task.worker_id].address,
                worker_index=task.worker_index if job.coordinated else None,
            )
            for task in self.state.live_tasks(job)
        ]

    def _accepts_new_tasks(self, job: JobState) -> bool:
        return job.active and not job.coordinated

    def _create_task(self, job: JobState, worker_id: int, worker_index: int) -> None:
        shard_ids: List[int] = []
        if job.policy == STATIC:
            # Shards left over from a registration without workers go to the next task.
            shard_ids = job.unassigned_static_shards()
        self._commit(
            EventType.TASK_CREATED,
            job_id=job.job_id, worker_id=worker_id, worker_index=worker_index, shard_ids=shard_ids,
        )

    def _clients_finished(self, job: JobState, tasks: List[TaskInfo]) -> bool:
        if not job.sharing:
            return True
        return all(job.clients <= self._finished_clients.get((job.job_id, t.worker_id), set()) for t in tasks)

    def _maybe_complete(self, job: JobState) -> None:
        """Completes a job once every live task is done; shared jobs also wait for every joined client."""
        tasks = self.state.live_tasks(job)
        if job.active and tasks and all(t.done for t in tasks) and self._clients_finished(job, tasks):
            self._commit(EventType.JOB_COMPLETED, job_id=job.job_id)
            logger.info(f"Job {job.job_id} ('{job.job_name}') completed.")

    def _epoch_shards(self, job: JobState) -> List[ShardSpec]:
        """Enumerates the source again for a new epoch; keeps the current shards if that fails."""
        try:
            return shards_for_graph(
                deserialize_graph(job.graph),
                job.granularity,
                job.shards_per_worker_hint,
                len(self.state.live_tasks(job)),
            )
        except DataServiceError as e:
            logger.warning(f"Cannot re-enumerate shards of job {job.job_id} ({e}); reusing {len(job.shards)}.")
            return list(job.shards)

    def _require_job(self, job_id: int) -> JobState:
        job = self.state.jobs.get(job_id)
        if job is None:
            raise UnknownJob(f"job {job_id} is not registered")
        return job

    # --- operations ---
    def register_worker(self, address: str) -> Tuple[int, List[TaskDef]]:
        """
        Records a worker and returns its id and the tasks it must run.

        A known address keeps its worker id; shards it had in flight are lost.
        """
        with self._lock:
            known = self.state.worker_by_address(address)
            worker_id = known.worker_id if known else self.state.next_worker_id
            self._commit(EventType.WORKER_REGISTERED, worker_id=worker_id, address=address)
            self._last_seen[worker_id] = self.clock()
            for job in self.state.active_jobs():
                if worker_id not in job.tasks and self._accepts_new_tasks(job):
                    self._create_task(job, worker_id, len(job.tasks))
            tasks = [
                self._task_def(job, job.tasks[worker_id])
                for job in self.state.active_jobs()
                if worker_id in job.tasks
            ]
        verb = "Re-registered" if known else "Registered"
        logger.info(f"{verb} worker {worker_id} at {address} with {len(tasks)} task(s).")
        return worker_id, tasks

    def register_job(
        self,
        graph: bytes,
        policy: str,
        job_name: Optional[str] = None,
        num_consumers: Optional[int] = None,
        sharing: bool = False,
        granularity: str = FILE,
        shards_per_worker_hint: int = 4,
        num_epochs: int = 1,
        seed: int = 0,
    ) -> JobHandle:
        """
        Registers a job, or joins the active job of the same name.

        Raises:
            PolicyMismatch: an active job has this name but a different graph,
                policy or consumer count.
            MalformedSpec: the graph or the job parameters are invalid.
            EmptyDataset: a sharded policy over a dataset without records.
        """
        policy = policy.upper()
        if policy not in POLICIES:
            raise MalformedSpec(f"unknown sharding policy '{policy}'")
        if num_consumers is not None and num_consumers < 1:
            raise MalformedSpec("num_consumers must be at least 1")
        if num_epochs < 1:
            raise MalformedSpec("num_epochs must be at least 1")
        parsed = deserialize_graph(graph)
        with self._lock:
            if job_name:
                existing = self.state.active_job_named(job_name)
                if existing is not None:
                    return self._join(existing, parsed, policy, num_consumers)
            live = self.state.live_workers()
            if num_consumers is not None and not live:
                raise MalformedSpec("coordinated reads need at least one registered worker")
            shards: List[ShardSpec] = []
            if policy != OFF:
                shards = shards_for_graph(parsed, granularity, shards_per_worker_hint, len(live))
            job_id = self.state.next_job_id
            name = job_name or f"job-{job_id}"
            self._commit(
                EventType.JOB_REGISTERED,
                job_id=job_id, job_name=name, graph=bytes(graph), fingerprint=parsed.fingerprint,
                policy=policy, num_consumers=num_consumers, sharing=sharing, granularity=granularity,
                shards_per_worker_hint=shards_per_worker_hint,
                num_epochs=num_epochs, seed=seed, num_workers=len(live) if num_consumers is not None else 0,
                shards=[s.to_dict() for s in shards],
            )
            for index, worker in enumerate(live):
                static = [i for i in range(len(shards)) if i % len(live) == index] if policy == STATIC else []
                self._commit(
                    EventType.TASK_CREATED,
                    job_id=job_id, worker_id=worker.worker_id, worker_index=index, shard_ids=static,
                )
            client_id = self.state.next_client_id
            self._commit(EventType.CLIENT_JOINED, job_id=job_id, client_id=client_id)
            job = self.state.jobs[job_id]
            handle = JobHandle(job_id, client_id, self._endpoints(job), created=True, num_workers=job.num_workers)
        logger.info(
            f"Registered job {job_id} ('{name}', {policy}, {len(shards)} shards, "
            f"{len(live)} worker(s), consumers={num_consumers}, sharing={sharing})."
        )
        return handle

    def _join(
        self, job: JobState, parsed: DatasetGraph, policy: str, num_consumers: Optional[int]
    ) -> JobHandle:
        if job.fingerprint != parsed.fingerprint or job.policy != policy or job.num_consumers != num_consumers:
            raise PolicyMismatch(
                f"job '{job.job_name}' is registered with fingerprint {job.fingerprint:016x}, "
                f"policy {job.policy}, consumers {job.num_consumers}"
            )
        client_id = self.state.next_client_id
        self._commit(EventType.CLIENT_JOINED, job_id=job.job_id, client_id=client_id)
        logger.info(f"Client {client_id} joined job {job.job_id} ('{job.job_name}').")
        return JobHandle(job.job_id, client_id, self._endpoints(job), created=False, num_workers=job.num_workers)

    def get_split(self, job_id: int, worker_id: int, completed_shard_id: Optional[int] = None) -> SplitResult:
        """
        Hands the head of the pending queue to `worker_id`.

        Asking for a split completes the shard the worker held. A result with
        neither a shard nor `end_of_splits` means "ask again later": the
        current epoch still has shards in flight elsewhere and a next epoch
        will follow.

        Raises:
            UnknownJob: no such job.
            WrongPolicy: the job is not DYNAMIC.
            UnknownWorker: the worker is unknown, dead, or has no task in the job.
        """
        with self._lock:
            job = self._require_job(job_id)
            if job.policy != DYNAMIC:
                raise WrongPolicy(f"job {job_id} uses {job.policy} sharding")
            worker = self.state.workers.get(worker_id)
            if worker is None or not worker.alive or worker_id not in job.tasks:
                raise UnknownWorker(f"worker {worker_id} has no live task in job {job_id}")
            self._last_seen[worker_id] = self.clock()
            a = job.assignment
            held = a.in_flight.get(worker_id)
            if held is not None:
                if completed_shard_id is not None and completed_shard_id != held:
                    logger.warning(
                        f"Worker {worker_id} reported shard {completed_shard_id} done but holds {held}."
                    )
                self._commit(EventType.SPLIT_COMPLETED, job_id=job_id, worker_id=worker_id, shard_id=held)
            if not job.active:
                return SplitResult(None, True, a.epoch)
            if a.drained and a.epoch + 1 < job.num_epochs:
                shards = self._epoch_shards(job)
                self._commit(
                    EventType.EPOCH_STARTED, job_id=job_id, epoch=a.epoch + 1, shards=[s.to_dict() for s in shards]
                )
                logger.info(f"Job {job_id} started epoch {a.epoch} with {len(shards)} shard(s).")
            if a.pending:
                shard_id = a.pending[0]
                self._commit(
                    EventType.SPLIT_ASSIGNED, job_id=job_id, worker_id=worker_id, shard_id=shard_id, epoch=a.epoch
                )
                logger.debug(f"Assigned shard {shard_id} of job {job_id} to worker {worker_id}.")
                return SplitResult(job.shards[shard_id], False, a.epoch)
            last_epoch = a.epoch + 1 >= job.num_epochs
            return SplitResult(None, last_epoch, a.epoch)

    def heartbeat(
        self,
        worker_id: int,
        tasks: List[TaskProgress],
        cpu_seconds: float = 0.0,
        rss_bytes: int = 0,
    ) -> Directives:
        """Refreshes liveness, records task progress and returns directives."""
        with self._lock:
            worker = self.state.workers.get(worker_id)
            if worker is None or not worker.alive:
                return Directives(reregister=True)
            self._last_seen[worker_id] = self.clock()
            self.telemetry[worker_id] = WorkerTelemetry(cpu_seconds, rss_bytes)
            for progress in tasks:
                job = self.state.jobs.get(progress.job_id)
                if job is None or worker_id not in job.tasks:
                    continue
                if progress.failed:
                    logger.error(f"Worker {worker_id} failed task of job {job.job_id}: {progress.failed}")
                if job.sharing:
                    self._finished_clients[(job.job_id, worker_id)] = set(progress.finished_clients)
                if progress.done and not job.tasks[worker_id].done and job.active:
                    self._commit(EventType.TASK_COMPLETED, job_id=job.job_id, worker_id=worker_id)
                self._maybe_complete(job)
            reported = {p.job_id for p in tasks}
            new_tasks = [
                self._task_def(job, job.tasks[worker_id])
                for job in self.state.active_jobs()
                if worker_id in job.tasks and job.job_id not in reported
            ]
            completed = sorted(
                job_id for job_id in reported
                if job_id not in self.state.jobs or not self.state.jobs[job_id].active
            )
            return Directives(new_tasks=new_tasks, completed_jobs=completed)

    def list_tasks(self, worker_id: int) -> List[TaskDef]:
        with self._lock:
            if worker_id not in self.state.workers:
                raise UnknownWorker(f"worker {worker_id} is not registered")
            return [
                self._task_def(job, job.tasks[worker_id])
                for job in self.state.active_jobs()
                if worker_id in job.tasks
            ]

    def client_heartbeat(self, job_id: int, client_id: int) -> JobUpdate:
        """Current worker pool and completion status of a job."""
        with self._lock:
            job = self._require_job(job_id)
            return JobUpdate(
                job_id=job_id,
                workers=self._endpoints(job),
                finished_workers=sorted(t.worker_id for t in job.tasks.values() if t.done),
                job_done=not job.active,
            )

    def check_liveness(self) -> List[int]:
        """Declares workers dead after `worker_timeout_ms` of silence; returns their ids."""
        lost: List[int] = []
        with self._lock:
            now = self.clock()
            for worker in self.state.live_workers():
                last = self._last_seen.get(worker.worker_id, now)
                if (now - last) * 1000.0 > self.worker_timeout_ms:
                    self._commit(EventType.WORKER_LOST, worker_id=worker.worker_id)
                    lost.append(worker.worker_id)
                    logger.warning(
                        f"Worker {worker.worker_id} at {worker.address} missed heartbeats "
                        f"for {(now - last) * 1000.0:.0f} ms; marked dead."
                    )
            if lost:
                for job in self.state.active_jobs():
                    self._maybe_complete(job)
        return lost

    def snapshot(self) -> Tuple[Dict[str, Any], Dict[int, WorkerTelemetry]]:
        """Plain-data view of the state plus the latest worker telemetry."""
        with self._lock:
            return self.state.to_dict(), dict(self.telemetry)

    def canonical_dump(self) -> bytes:
        with self._lock:
            return self.state.canonical_dump()

    def close(self) -> None:
        self.journal.close()


def recover(
    journal: Union[Journal, MemoryJournal],
    worker_timeout_ms: int = 3000,
    clock: Clock = time.monotonic,
) -> Dispatcher:
    """
    Rebuilds a dispatcher from its journal.

    The state is the fold of every complete record; a torn final record is
    truncated. Shards that were in flight on workers lost before the crash are
    already in the lost set; live workers get one timeout to heartbeat again.

    Raises:
        CorruptJournal: the journal is damaged before its final record.
    """
    records = journal.recover()
    state = DispatcherState.replay(records)
    logger.info(
        f"Recovered dispatcher state: {len(state.workers)} worker(s), {len(state.jobs)} job(s), "
        f"last sequence {state.last_seq}."
    )
    return Dispatcher(journal=journal, state=state, worker_timeout_ms=worker_timeout_ms, clock=clock)
