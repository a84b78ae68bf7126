# src/wire/messages.py
"""
Message catalog.

Every message is a pydantic model with a fixed `MSG_TYPE`. Each request type
has exactly one response type (`RESPONSE_FOR`); any request may instead be
answered with an `ErrorResponse`. Bodies are encoded with the key/value
layout of `src.core.binary`, plus a reserved `__v` key carrying the schema
version.
"""

from typing import ClassVar, Dict, List, Literal, Optional, Type

from pydantic import BaseModel, ConfigDict, Field

from src.data_processing.shards import ShardSpec
from src.pipeline.elements import Batch

SCHEMA_VERSION = 1


class Message(BaseModel):
    model_config = ConfigDict(frozen=True)
    MSG_TYPE: ClassVar[int] = 0
    VERSION: ClassVar[int] = SCHEMA_VERSION


# --- shared sub-structures ---
class TaskDef(BaseModel):
    """Everything a worker needs to run its part of a job."""
    job_id: int
    job_name: str
    graph: bytes
    policy: str
    num_consumers: Optional[int] = None
    sharing: bool = False
    worker_index: int = 0
    num_workers: int = 1
    shards: List[ShardSpec] = Field(default_factory=list, description="STATIC policy shard list.")
    seed: int = 0


class WorkerEndpoint(BaseModel):
    worker_id: int
    address: str
    worker_index: Optional[int] = None


class TaskProgress(BaseModel):
    job_id: int
    produced: int = 0
    done: bool = False
    failed: Optional[str] = None
    finished_clients: List[int] = Field(default_factory=list, description="Shared jobs: clients whose pass is complete.")


# --- workers <-> dispatcher ---
class RegisterWorkerRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x0001
    address: str


class RegisterWorkerResponse(Message):
    MSG_TYPE: ClassVar[int] = 0x0002
    worker_id: int
    tasks: List[TaskDef] = Field(default_factory=list)


class GetSplitRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x0005
    job_id: int
    worker_id: int
    completed_shard_id: Optional[int] = None


class GetSplitResponse(Message):
    MSG_TYPE: ClassVar[int] = 0x0006
    shard: Optional[ShardSpec] = None
    end_of_splits: bool = False
    epoch: int = 0


class HeartbeatRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x0007
    worker_id: int
    tasks: List[TaskProgress] = Field(default_factory=list)
    cpu_seconds: float = 0.0
    rss_bytes: int = 0


class HeartbeatResponse(Message):
    MSG_TYPE: ClassVar[int] = 0x0008
    new_tasks: List[TaskDef] = Field(default_factory=list)
    completed_jobs: List[int] = Field(default_factory=list)
    reregister: bool = False


class ListTasksRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x0009
    worker_id: int


class ListTasksResponse(Message):
    MSG_TYPE: ClassVar[int] = 0x000A
    tasks: List[TaskDef] = Field(default_factory=list)


# --- clients <-> dispatcher ---
class RegisterJobRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x0003
    graph: bytes
    policy: str
    job_name: Optional[str] = None
    num_consumers: Optional[int] = None
    sharing: bool = False
    granularity: str = "file"
    shards_per_worker_hint: int = 4
    num_epochs: int = 1
    seed: int = 0


class RegisterJobResponse(Message):
    MSG_TYPE: ClassVar[int] = 0x0004
    job_id: int
    client_id: int
    workers: List[WorkerEndpoint] = Field(default_factory=list)
    num_workers: int = Field(0, description="Round-robin width of a coordinated job; 0 otherwise.")


class ClientHeartbeatRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x000B
    job_id: int
    client_id: int


class JobUpdate(Message):
    MSG_TYPE: ClassVar[int] = 0x000C
    job_id: int
    workers: List[WorkerEndpoint] = Field(default_factory=list)
    finished_workers: List[int] = Field(default_factory=list)
    job_done: bool = False


class GetStateRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x0011


class StateDump(Message):
    MSG_TYPE: ClassVar[int] = 0x0012
    state: bytes


# --- clients <-> workers ---
class GetElementRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x000D
    job_id: int
    client_id: int
    consumer_index: Optional[int] = None
    round: Optional[int] = None


class ElementResult(Message):
    MSG_TYPE: ClassVar[int] = 0x000E
    status: Literal["batch", "pending", "end_of_job"]
    batch: Optional[Batch] = None
    round: Optional[int] = None


class CacheStatsRequest(Message):
    MSG_TYPE: ClassVar[int] = 0x000F
    job_id: int


class CacheStatsResponse(Message):
    MSG_TYPE: ClassVar[int] = 0x0010
    job_id: int
    window_floor: int = 0
    next_seq: int = 0
    pointers: Dict[str, int] = Field(default_factory=dict)
    evictions: int = 0
    produced: int = 0
    cpu_seconds: float = 0.0
    rss_bytes: int = 0


class ErrorResponse(Message):
    MSG_TYPE: ClassVar[int] = 0x7FFF
    code: int
    detail: str = ""


RESPONSE_FOR: Dict[Type[Message], Type[Message]] = {
    RegisterWorkerRequest: RegisterWorkerResponse,
    RegisterJobRequest: RegisterJobResponse,
    GetSplitRequest: GetSplitResponse,
    HeartbeatRequest: HeartbeatResponse,
    ListTasksRequest: ListTasksResponse,
    ClientHeartbeatRequest: JobUpdate,
    GetStateRequest: StateDump,
    GetElementRequest: ElementResult,
    CacheStatsRequest: CacheStatsResponse,
}

MESSAGE_TYPES: Dict[int, Type[Message]] = {
    cls.MSG_TYPE: cls
    for cls in [*RESPONSE_FOR.keys(), *RESPONSE_FOR.values(), ErrorResponse]
}
