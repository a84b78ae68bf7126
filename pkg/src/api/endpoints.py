# src/api/endpoints.py
"""
Read-only status endpoints of the dispatcher.

The routes expose the dispatcher's registered workers, jobs and canonical
state. They never mutate anything; clients and workers talk to the
dispatcher over the wire protocol only.
"""

import logging
from typing import List

from fastapi import APIRouter, Depends, HTTPException

from src.api.models import JobStatus, StateResponse, WorkerStatus
from src.core.dependencies import get_dispatcher
from src.dispatcher.service import Dispatcher

logger = logging.getLogger(__name__)

# This router is included in the main FastAPI application under /api/v1.
router = APIRouter()


@router.get(
    "/workers",
    response_model=List[WorkerStatus],
    tags=["Status"],
    summary="List registered workers",
)
def list_workers(dispatcher: Dispatcher = Depends(get_dispatcher)) -> List[WorkerStatus]:
    try:
        state, telemetry = dispatcher.snapshot()
    except Exception as e:
        logger.error("Cannot read dispatcher state.", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Cannot read dispatcher state: {e}")
    workers = []
    for w in state["workers"]:
        t = telemetry.get(w["worker_id"])
        workers.append(WorkerStatus(
            **w,
            cpu_seconds=t.cpu_seconds if t else None,
            rss_bytes=t.rss_bytes if t else None,
        ))
    return workers


@router.get(
    "/jobs",
    response_model=List[JobStatus],
    tags=["Status"],
    summary="List jobs",
)
def list_jobs(dispatcher: Dispatcher = Depends(get_dispatcher)) -> List[JobStatus]:
    state, _ = dispatcher.snapshot()
    return [JobStatus(**job) for job in state["jobs"]]


@router.get(
    "/jobs/{job_id}",
    response_model=JobStatus,
    tags=["Status"],
    summary="Describe one job",
    description="Returns the job's policy, tasks and, for dynamic sharding, the current epoch's shard queues.",
)
def get_job(job_id: int, dispatcher: Dispatcher = Depends(get_dispatcher)) -> JobStatus:
    state, _ = dispatcher.snapshot()
    for job in state["jobs"]:
        if job["job_id"] == job_id:
            return JobStatus(**job)
    raise HTTPException(status_code=404, detail=f"Unknown job {job_id}")


@router.get(
    "/state",
    response_model=StateResponse,
    tags=["Status"],
    summary="Canonical state dump",
)
def get_state(dispatcher: Dispatcher = Depends(get_dispatcher)) -> StateResponse:
    dump = dispatcher.canonical_dump()
    return StateResponse(last_seq=dispatcher.state.last_seq, state_hex=dump.hex())
