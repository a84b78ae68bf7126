# config.py
"""
Centralized configuration management for the DataFeed project.

This module uses pydantic-settings to manage service settings, allowing for
type-hinted, validated configurations that can be loaded from an environment
variable file (.env). The dispatcher, worker and bench scripts take their
command-line defaults from here.
"""

from pathlib import Path
from typing import Literal

from pydantic import ValidationInfo, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Define the absolute path to the project's root directory. This ensures that all
# file paths constructed from here are robust and independent of the current
# working directory from which scripts are run.
BASE_DIR = Path(__file__).parent.resolve()


class Settings(BaseSettings):
    """
    Defines and validates the service settings.

    Attributes are automatically loaded from a .env file or the environment.
    Pydantic ensures that values have the correct data type and sane ranges.
    """
    model_config = SettingsConfigDict(
        env_file=BASE_DIR / '.env',
        env_file_encoding='utf-8',
        extra='ignore'
    )

    # --- Client ---
    # Default dispatcher address used by clients and workers.
    DFS_DISPATCHER: str = "127.0.0.1:5050"

    # --- Dispatcher ---
    DISPATCHER_PORT: int = 5050
    STATUS_PORT: int = 8000
    JOURNAL_PATH: Path = BASE_DIR / "journal" / "dispatcher.journal"
    JOURNAL_FSYNC: bool = True
    HEARTBEAT_INTERVAL_MS: int = 1000
    WORKER_TIMEOUT_MS: int = 3000

    # --- Worker ---
    WORKER_PORT: int = 0
    BUFFER_BATCHES: int = 8
    WINDOW_BATCHES: int = 16

    # --- Wire ---
    RPC_TIMEOUT_MS: int = 10000
    RPC_HANDLER_THREADS: int = 16
    COMPRESSION: Literal["none", "lz4"] = "none"

    # --- Data & Reports ---
    DATA_DIR: Path = BASE_DIR / "data"
    REPORT_DIR: Path = BASE_DIR / "reports"

    LOG_LEVEL: str = "INFO"

    @field_validator(
        "HEARTBEAT_INTERVAL_MS", "BUFFER_BATCHES", "WINDOW_BATCHES",
        "RPC_TIMEOUT_MS", "RPC_HANDLER_THREADS"
    )
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """
        Intervals, capacities and pool sizes must be strictly positive.
        """
        if v <= 0:
            raise ValueError("must be a positive integer")
        return v

    @field_validator("WORKER_TIMEOUT_MS")
    @classmethod
    def validate_worker_timeout(cls, v: int, info: ValidationInfo) -> int:
        """
        A worker cannot be declared dead before it had a chance to heartbeat once.
        """
        interval = info.data.get("HEARTBEAT_INTERVAL_MS")
        if interval is not None and v < interval:
            raise ValueError(
                f"WORKER_TIMEOUT_MS ({v}) must be at least HEARTBEAT_INTERVAL_MS ({interval})."
            )
        return v


# Create a single, globally accessible instance of the settings.
# Import this instance into other modules to access configuration values.
# Example: `from config import settings`
settings = Settings()
