# src/bench/config.py
"""
Experiment configuration and its flat text format.

A config file holds one `key = value` pair per line. Blank lines and lines
starting with `#` are ignored. Keys with a `dataset.` prefix configure the
synthetic dataset; list values are comma-separated. Example:

    experiment_id = scale-out
    mode = remote
    num_workers = 4
    busy_work_ms = 5
    batch_size = 32
    step_time_ms = 10
    dataset.num_files = 16
    dataset.records_per_file = 256
    failure_target = worker:1
    failure_at_fraction = 0.5
"""

import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.bench.cost import OPEN_SOURCE_ACC_PRICE, OPEN_SOURCE_CPU_PRICE
from src.core.errors import ConfigError, IoFailure
from src.data_processing.synthetic import SyntheticSpec

_TARGET = re.compile(r"^(dispatcher|worker:\d+)$")
_LIST_KEYS = {"bucket_boundaries"}


def default_dataset() -> SyntheticSpec:
    return SyntheticSpec(num_files=8, records_per_file=128)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment_id: str = "experiment"
    mode: Literal["ideal", "colocated", "remote"] = "remote"
    num_workers: int = Field(1, ge=0, description="Remote workers (n_W).")
    num_clients: int = Field(1, ge=0, description="Training clients (n_T).")
    processes: bool = Field(True, description="Run the dispatcher and remote workers as child processes.")

    # --- data & pipeline ---
    dataset: SyntheticSpec = Field(default_factory=default_dataset)
    busy_work_ms: float = Field(0.0, ge=0.0, description="CPU burn per element, calibrated once per run.")
    busy_work_rounds: Optional[int] = Field(None, ge=0, description="Overrides the calibrated burn rounds.")
    batch_size: int = Field(32, ge=1)
    bucket_boundaries: Optional[List[int]] = None
    step_time_ms: float = Field(0.0, ge=0.0, description="Simulated step time of a batch padded to max_len.")
    max_len: Optional[int] = Field(None, ge=1, description="Padded length a full step corresponds to.")

    # --- service settings ---
    policy: Literal["OFF", "DYNAMIC", "STATIC"] = "DYNAMIC"
    sharing: bool = False
    coordinated: bool = False
    job_name: Optional[str] = None
    num_epochs: int = Field(1, ge=1)
    job_seed: int = 0
    buffer_batches: int = Field(8, ge=1)
    window_batches: int = Field(16, ge=1)
    fetch_parallelism: int = Field(1, ge=1)
    heartbeat_interval_ms: int = Field(200, ge=1)
    worker_timeout_ms: int = Field(1000, ge=1)
    latency_ms: float = Field(0.0, ge=0.0, description="Injected delay per worker call.")

    # --- failures ---
    failure_target: Optional[str] = Field(None, description="'worker:<i>' or 'dispatcher'.")
    failure_at_fraction: Optional[float] = Field(None, ge=0.0, le=1.0, description="Share of dataset elements consumed.")
    failure_at_s: Optional[float] = Field(None, ge=0.0, description="Seconds after the clients start.")
    failure_restart_after_ms: Optional[float] = Field(None, ge=0.0)

    # --- budget ---
    duration_s: Optional[float] = Field(None, gt=0.0)
    element_budget: Optional[int] = Field(None, ge=1, description="Elements per client before it stops.")
    timeout_s: float = Field(300.0, gt=0.0)

    # --- cost ---
    c_cpu: float = Field(OPEN_SOURCE_CPU_PRICE, ge=0.0)
    c_mem: float = Field(0.0, ge=0.0)
    c_acc: float = Field(OPEN_SOURCE_ACC_PRICE, ge=0.0)
    client_cpu: float = Field(1.0, ge=0.0, description="CPU cores allocated per client.")
    client_mem_gib: float = Field(1.0, ge=0.0)
    acc_per_client: int = Field(1, ge=0)

    @field_validator("failure_target")
    @classmethod
    def check_target(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not _TARGET.match(v):
            raise ValueError(f"failure target must be 'dispatcher' or 'worker:<i>', got '{v}'")
        return v

    @model_validator(mode="after")
    def check_mode(self) -> "ExperimentConfig":
        if self.mode == "remote" and self.num_workers < 1:
            raise ValueError("remote mode needs at least one worker")
        if self.coordinated and self.sharing:
            raise ValueError("coordinated reads cannot be combined with sharing")
        if self.mode == "ideal" and self.duration_s is None and self.element_budget is None:
            raise ValueError("ideal mode repeats forever; set duration_s or element_budget")
        if self.failure_target is not None and self.failure_at_fraction is None and self.failure_at_s is None:
            raise ValueError("a failure target needs failure_at_fraction or failure_at_s")
        return self

    @property
    def effective_job_name(self) -> str:
        return self.job_name or self.experiment_id

    @property
    def step_max_len(self) -> int:
        if self.max_len is not None:
            return self.max_len
        spec = self.dataset
        return max(spec.long_len if spec.seq_len_distribution == "bimodal" else spec.seq_len_max, 1)


def _split_value(key: str, value: str) -> Any:
    if key in _LIST_KEYS:
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def parse_config_text(text: str) -> ExperimentConfig:
    """
    Raises:
        ConfigError: a line is not `key = value`, or a value is invalid.
    """
    values: Dict[str, Any] = {}
    dataset: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw}'")
        if key.startswith("dataset."):
            dataset[key[len("dataset."):]] = value
        else:
            values[key] = _split_value(key, value)
    if dataset:
        values["dataset"] = {**default_dataset().model_dump(), **dataset}
    return build_config(**values)


def build_config(**values: Any) -> ExperimentConfig:
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot read experiment config '{path}': {e}") from e
    return parse_config_text(text)
