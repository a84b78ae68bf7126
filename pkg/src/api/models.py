# src/api/models.py
"""
Pydantic response schemas of the dispatcher status API.

These models also power the automatic OpenAPI (Swagger) documentation of the
read-only endpoints.
"""

from typing import List, Optional

from pydantic import BaseModel, Field


class WorkerStatus(BaseModel):
    """
    A registered worker and the telemetry of its latest heartbeat.
    """
    worker_id: int
    address: str = Field(..., examples=["127.0.0.1:46011"])
    alive: bool
    cpu_seconds: Optional[float] = Field(None, description="Process CPU time reported by the worker.")
    rss_bytes: Optional[int] = Field(None, description="Resident memory reported by the worker.")


class TaskStatus(BaseModel):
    worker_id: int
    worker_index: int
    shard_ids: List[int] = Field(default_factory=list, description="Statically assigned shards.")
    done: bool


class AssignmentStatus(BaseModel):
    """Dynamic sharding progress of a job in its current epoch."""
    epoch: int
    pending: List[int]
    in_flight: List[List[int]] = Field(..., description="[worker_id, shard_id] pairs.")
    completed: List[int]
    lost: List[int]


class JobStatus(BaseModel):
    job_id: int
    job_name: Optional[str] = None
    policy: str = Field(..., examples=["DYNAMIC"])
    sharing: bool
    num_consumers: Optional[int] = None
    num_epochs: int
    num_workers: Optional[int] = None
    num_shards: int
    status: str = Field(..., examples=["active", "completed"])
    clients: List[int]
    tasks: List[TaskStatus]
    assignment: Optional[AssignmentStatus] = None


class StateResponse(BaseModel):
    last_seq: int = Field(..., description="Sequence number of the last applied journal record.")
    state_hex: str = Field(..., description="Canonical state dump, hex encoded.")
