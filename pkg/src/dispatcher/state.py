# src/dispatcher/state.py
"""
Dispatcher state as a pure fold over journal records.

`DispatcherState.apply` is the only way state changes, both while serving and
while replaying, so a recovered dispatcher is exactly the fold of its journal.
Liveness timestamps and telemetry are not part of this state.
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Set

from src.core.binary import encode_map
from src.core.errors import CorruptJournal
from src.data_processing.shards import ShardSpec
from src.dispatcher.journal import EventType, JournalRecord

OFF = "OFF"
DYNAMIC = "DYNAMIC"
STATIC = "STATIC"
POLICIES = (OFF, DYNAMIC, STATIC)

ACTIVE = "active"
COMPLETED = "completed"


@dataclass
class WorkerInfo:
    worker_id: int
    address: str
    alive: bool = True
    registrations: int = 1


@dataclass
class TaskInfo:
    job_id: int
    worker_id: int
    worker_index: int
    shard_ids: List[int] = field(default_factory=list)
    done: bool = False


@dataclass
class ShardAssignment:
    """
    DYNAMIC dispatch state of one job for the current epoch.

    pending, in_flight, completed and lost partition the job's shard ids.
    """
    job_id: int
    num_shards: int
    epoch: int = 0
    pending: Deque[int] = field(default_factory=deque)
    in_flight: Dict[int, int] = field(default_factory=dict)
    completed: Set[int] = field(default_factory=set)
    lost: Set[int] = field(default_factory=set)

    def restart(self, epoch: int) -> None:
        self.epoch = epoch
        self.pending = deque(range(self.num_shards))
        self.in_flight.clear()
        self.completed.clear()
        self.lost.clear()

    def lose(self, worker_id: int) -> Optional[int]:
        shard_id = self.in_flight.pop(worker_id, None)
        if shard_id is not None:
            self.lost.add(shard_id)
        return shard_id

    @property
    def drained(self) -> bool:
        return not self.pending and not self.in_flight


@dataclass
class JobState:
    job_id: int
    job_name: str
    graph: bytes
    fingerprint: int
    policy: str
    num_consumers: Optional[int] = None
    sharing: bool = False
    granularity: str = "file"
    shards_per_worker_hint: int = 4
    num_epochs: int = 1
    seed: int = 0
    # Coordinated jobs freeze their worker count at registration.
    num_workers: int = 0
    shards: List[ShardSpec] = field(default_factory=list)
    clients: Set[int] = field(default_factory=set)
    tasks: Dict[int, TaskInfo] = field(default_factory=dict)
    status: str = ACTIVE
    assignment: Optional[ShardAssignment] = None

    @property
    def coordinated(self) -> bool:
        return self.num_consumers is not None

    @property
    def active(self) -> bool:
        return self.status == ACTIVE

    def unassigned_static_shards(self) -> List[int]:
        taken = {s for task in self.tasks.values() for s in task.shard_ids}
        return [i for i in range(len(self.shards)) if i not in taken]


@dataclass
class DispatcherState:
    workers: Dict[int, WorkerInfo] = field(default_factory=dict)
    jobs: Dict[int, JobState] = field(default_factory=dict)
    next_worker_id: int = 1
    next_job_id: int = 1
    next_client_id: int = 1
    last_seq: int = 0

    # --- queries ---
    def worker_by_address(self, address: str) -> Optional[WorkerInfo]:
        for worker in self.workers.values():
            if worker.address == address:
                return worker
        return None

    def live_workers(self) -> List[WorkerInfo]:
        return [w for w in sorted(self.workers.values(), key=lambda w: w.worker_id) if w.alive]

    def active_job_named(self, job_name: str) -> Optional[JobState]:
        for job in self.jobs.values():
            if job.active and job.job_name == job_name:
                return job
        return None

    def active_jobs(self) -> List[JobState]:
        return [j for j in sorted(self.jobs.values(), key=lambda j: j.job_id) if j.active]

    def live_tasks(self, job: JobState) -> List[TaskInfo]:
        return [
            t for t in sorted(job.tasks.values(), key=lambda t: t.worker_id)
            if self.workers.get(t.worker_id) is not None and self.workers[t.worker_id].alive
        ]

    # --- fold ---
    def apply(self, record: JournalRecord) -> None:
        if record.seq <= self.last_seq:
            raise CorruptJournal(f"record {record.seq} does not follow {self.last_seq}")
        p = record.payload
        try:
            handler = _HANDLERS[record.event]
            handler(self, p)
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise CorruptJournal(f"record {record.seq} ({record.event.name}) cannot be applied: {e!r}") from e
        self.last_seq = record.seq

    def _worker_registered(self, p: Dict[str, Any]) -> None:
        worker_id = p["worker_id"]
        worker = self.workers.get(worker_id)
        if worker is None:
            self.workers[worker_id] = WorkerInfo(worker_id=worker_id, address=p["address"])
        else:
            worker.address = p["address"]
            worker.alive = True
            worker.registrations += 1
            # A restarted worker never gets its old splits back.
            self._lose_in_flight(worker_id)
        self.next_worker_id = max(self.next_worker_id, worker_id + 1)

    def _worker_lost(self, p: Dict[str, Any]) -> None:
        self.workers[p["worker_id"]].alive = False
        self._lose_in_flight(p["worker_id"])

    def _lose_in_flight(self, worker_id: int) -> None:
        for job in self.jobs.values():
            if job.assignment is not None:
                job.assignment.lose(worker_id)

    def _job_registered(self, p: Dict[str, Any]) -> None:
        job_id = p["job_id"]
        shards = [ShardSpec.from_dict(s) for s in p["shards"]]
        job = JobState(
            job_id=job_id,
            job_name=p["job_name"],
            graph=p["graph"],
            fingerprint=p["fingerprint"],
            policy=p["policy"],
            num_consumers=p["num_consumers"],
            sharing=p["sharing"],
            granularity=p["granularity"],
            shards_per_worker_hint=p["shards_per_worker_hint"],
            num_epochs=p["num_epochs"],
            seed=p["seed"],
            num_workers=p["num_workers"],
            shards=shards,
        )
        if job.policy == DYNAMIC:
            job.assignment = ShardAssignment(job_id=job_id, num_shards=len(shards))
            job.assignment.restart(0)
        self.jobs[job_id] = job
        self.next_job_id = max(self.next_job_id, job_id + 1)

    def _task_created(self, p: Dict[str, Any]) -> None:
        job = self.jobs[p["job_id"]]
        job.tasks[p["worker_id"]] = TaskInfo(
            job_id=job.job_id,
            worker_id=p["worker_id"],
            worker_index=p["worker_index"],
            shard_ids=list(p["shard_ids"]),
        )

    def _split_assigned(self, p: Dict[str, Any]) -> None:
        a = self.jobs[p["job_id"]].assignment
        shard_id, worker_id = p["shard_id"], p["worker_id"]
        if p["epoch"] != a.epoch or shard_id not in a.pending or worker_id in a.in_flight:
            raise ValueError(f"shard {shard_id} is not assignable to worker {worker_id}")
        a.pending.remove(shard_id)
        a.in_flight[worker_id] = shard_id

    def _split_completed(self, p: Dict[str, Any]) -> None:
        a = self.jobs[p["job_id"]].assignment
        if a.in_flight.get(p["worker_id"]) != p["shard_id"]:
            raise ValueError(f"shard {p['shard_id']} is not in flight on worker {p['worker_id']}")
        del a.in_flight[p["worker_id"]]
        a.completed.add(p["shard_id"])

    def _epoch_started(self, p: Dict[str, Any]) -> None:
        job = self.jobs[p["job_id"]]
        shards = [ShardSpec.from_dict(s) for s in p["shards"]]
        if job.assignment is None:
            raise ValueError(f"job {job.job_id} has no shard queue")
        job.shards = shards
        job.assignment.num_shards = len(shards)
        job.assignment.restart(p["epoch"])

    def _task_completed(self, p: Dict[str, Any]) -> None:
        self.jobs[p["job_id"]].tasks[p["worker_id"]].done = True

    def _job_completed(self, p: Dict[str, Any]) -> None:
        self.jobs[p["job_id"]].status = COMPLETED

    def _client_joined(self, p: Dict[str, Any]) -> None:
        self.jobs[p["job_id"]].clients.add(p["client_id"])
        self.next_client_id = max(self.next_client_id, p["client_id"] + 1)

    # --- canonical form ---
    def to_dict(self) -> Dict[str, Any]:
        jobs = []
        for job in sorted(self.jobs.values(), key=lambda j: j.job_id):
            a = job.assignment
            jobs.append({
                "job_id": job.job_id,
                "job_name": job.job_name,
                "fingerprint": job.fingerprint,
                "policy": job.policy,
                "num_consumers": job.num_consumers,
                "sharing": job.sharing,
                "num_epochs": job.num_epochs,
                "num_workers": job.num_workers,
                "num_shards": len(job.shards),
                "status": job.status,
                "clients": sorted(job.clients),
                "tasks": [
                    {"worker_id": t.worker_id, "worker_index": t.worker_index,
                     "shard_ids": list(t.shard_ids), "done": t.done}
                    for t in sorted(job.tasks.values(), key=lambda t: t.worker_id)
                ],
                "assignment": None if a is None else {
                    "epoch": a.epoch,
                    "pending": list(a.pending),
                    "in_flight": [[w, s] for w, s in sorted(a.in_flight.items())],
                    "completed": sorted(a.completed),
                    "lost": sorted(a.lost),
                },
            })
        return {
            "workers": [
                {"worker_id": w.worker_id, "address": w.address, "alive": w.alive}
                for w in sorted(self.workers.values(), key=lambda w: w.worker_id)
            ],
            "jobs": jobs,
            "next_worker_id": self.next_worker_id,
            "next_job_id": self.next_job_id,
            "next_client_id": self.next_client_id,
            "last_seq": self.last_seq,
        }

    def canonical_dump(self) -> bytes:
        """Deterministic byte form of the state, for byte-for-byte comparison."""
        return encode_map(self.to_dict())

    @classmethod
    def replay(cls, records: List[JournalRecord]) -> "DispatcherState":
        state = cls()
        for record in records:
            state.apply(record)
        return state


_HANDLERS = {
    EventType.WORKER_REGISTERED: DispatcherState._worker_registered,
    EventType.WORKER_LOST: DispatcherState._worker_lost,
    EventType.JOB_REGISTERED: DispatcherState._job_registered,
    EventType.TASK_CREATED: DispatcherState._task_created,
    EventType.SPLIT_ASSIGNED: DispatcherState._split_assigned,
    EventType.SPLIT_COMPLETED: DispatcherState._split_completed,
    EventType.EPOCH_STARTED: DispatcherState._epoch_started,
    EventType.TASK_COMPLETED: DispatcherState._task_completed,
    EventType.JOB_COMPLETED: DispatcherState._job_completed,
    EventType.CLIENT_JOINED: DispatcherState._client_joined,
}
