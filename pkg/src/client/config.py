# src/client/config.py
"""Client-side configuration of a distributed input pipeline."""

import os
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

from config import settings
from src.core.errors import ConfigError

DISPATCHER_ENV = "DFS_DISPATCHER"


def default_dispatcher() -> str:
    return os.environ.get(DISPATCHER_ENV) or settings.DFS_DISPATCHER


class DistributeConfig(BaseModel):
    """
    How a client reads a pipeline from the service.

    Coordinated reads are enabled by setting both `num_consumers` and
    `consumer_index`.
    """
    dispatcher_address: str = Field(default_factory=default_dispatcher, description="Dispatcher host:port.")
    job_name: Optional[str] = Field(None, description="Clients using the same name join one job.")
    sharding_policy: Literal["OFF", "DYNAMIC", "STATIC"] = "OFF"
    sharing: bool = Field(False, description="Serve every client of the job from one sliding-window cache.")
    read_sources: Literal["local", "remote", "both"] = "remote"
    compression: bool = False
    num_consumers: Optional[int] = Field(None, ge=1)
    consumer_index: Optional[int] = Field(None, ge=0)
    buffer_capacity: int = Field(8, ge=1, description="Client buffer bound, in batches.")
    fetch_parallelism: int = Field(1, ge=1, description="Concurrent fetchers per worker.")
    granularity: Literal["file", "element-range", "file-set"] = "file"
    shards_per_worker_hint: int = Field(4, ge=1)
    num_epochs: int = Field(1, ge=1)
    seed: int = 0
    rpc_timeout_ms: int = Field(10000, ge=1)
    latency_ms: float = Field(0.0, ge=0.0, description="Injected delay per worker call.")
    poll_interval_ms: int = Field(200, ge=1, description="Client heartbeat period.")
    workers_lost_grace_ms: int = Field(5000, ge=0, description="How long an empty worker pool is tolerated.")

    @model_validator(mode="after")
    def check_coordination(self) -> "DistributeConfig":
        if (self.num_consumers is None) != (self.consumer_index is None):
            raise ValueError("coordinated reads need both num_consumers and consumer_index")
        if self.num_consumers is not None and self.consumer_index >= self.num_consumers:
            raise ValueError(
                f"consumer_index {self.consumer_index} must be below num_consumers {self.num_consumers}"
            )
        if self.num_consumers is not None and self.sharing:
            raise ValueError("coordinated reads cannot be combined with sharing")
        return self

    @property
    def coordinated(self) -> bool:
        return self.num_consumers is not None

    @classmethod
    def create(cls, **values: Any) -> "DistributeConfig":
        """Validates keyword values, raising ConfigError instead of a pydantic error."""
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(str(e)) from e
