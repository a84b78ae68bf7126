# src/bench/cost.py
"""
Cost model of a training job and the processing-cost bounds of ephemeral
data sharing.

    cost = t * ( C_cpu * (n_w * cpu_w + n_t * cpu_t)
               + C_mem * (n_w * mem_w + n_t * mem_t)
               + C_acc * n_t * acc_per_t )

Worker terms are measured means; client terms are allocations.
"""

from typing import NamedTuple

from pydantic import BaseModel, Field

from src.core.errors import InvalidSizes, NegativeParam

# Disclosed open-source prices, $/hour: accelerator VM and one worker core.
OPEN_SOURCE_ACC_PRICE = 4.5
OPEN_SOURCE_CPU_PRICE = 0.08


class CostParams(BaseModel):
    t: float = Field(..., description="Job time.")
    n_w: float = Field(0, description="Number of workers.")
    n_t: float = Field(1, description="Number of clients (training hosts).")
    n_acc_per_t: float = Field(1, description="Accelerators per client.")
    c_cpu: float = Field(OPEN_SOURCE_CPU_PRICE, description="Price of one CPU core per time unit.")
    c_mem: float = Field(0.0, description="Price of one memory unit per time unit.")
    c_acc: float = Field(OPEN_SOURCE_ACC_PRICE, description="Price of one accelerator per time unit.")
    cpu_w: float = Field(0.0, description="Measured mean CPU use per worker, in cores.")
    mem_w: float = Field(0.0, description="Measured mean memory use per worker.")
    cpu_t: float = Field(0.0, description="CPU allocation per client, in cores.")
    mem_t: float = Field(0.0, description="Memory allocation per client.")


def cost(p: CostParams) -> float:
    """
    Raises:
        NegativeParam: any parameter is negative.
    """
    negative = [name for name, value in p.model_dump().items() if value < 0]
    if negative:
        raise NegativeParam(f"negative cost parameter(s): {', '.join(negative)}")
    cpu = p.c_cpu * (p.n_w * p.cpu_w + p.n_t * p.cpu_t)
    mem = p.c_mem * (p.n_w * p.mem_w + p.n_t * p.mem_t)
    acc = p.c_acc * p.n_t * p.n_acc_per_t
    return p.t * (cpu + mem + acc)


class SharingBounds(NamedTuple):
    best: float
    worst: float


def sharing_cost_bounds(k: int, one_pass_cost: float, cache_size: float, dataset_size: float) -> SharingBounds:
    """
    Processing cost of k jobs sharing one sliding-window cache.

    Equal-speed jobs pay for one pass; fully sequential jobs recompute
    everything except what the first job left in the cache.

    Raises:
        InvalidSizes: k < 1, or the cache size is outside (0, dataset_size].
    """
    if k < 1:
        raise InvalidSizes(f"need at least one job, got {k}")
    if not 0 < cache_size <= dataset_size:
        raise InvalidSizes(f"cache size {cache_size} must be in (0, {dataset_size}]")
    reused = (k - 1) * one_pass_cost * cache_size / dataset_size
    return SharingBounds(best=one_pass_cost, worst=k * one_pass_cost - reused)
