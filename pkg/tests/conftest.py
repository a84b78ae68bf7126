# tests/conftest.py
"""Shared fixtures: small synthetic datasets and a manual clock."""

import sys
from pathlib import Path

import pytest

project_root = Path(__file__).parent.parent.resolve()
if str(project_root) not in sys.path:
    sys.path.append(str(project_root))

from src.data_processing.synthetic import SyntheticSpec, generate_synthetic  # noqa: E402


class FakeClock:
    """Monotonic clock in seconds, advanced by hand."""

    def __init__(self, start: float = 100.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance_ms(self, ms: float) -> None:
        self.now += ms / 1000.0


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def small_dataset(tmp_path):
    """Four files of 25 uniform-length records."""
    spec = SyntheticSpec(num_files=4, records_per_file=25, seq_len_min=1, seq_len_max=64, seed=3)
    manifest = generate_synthetic(spec, tmp_path / "data")
    return tmp_path / "data", manifest


@pytest.fixture
def bimodal_dataset(tmp_path):
    spec = SyntheticSpec(
        num_files=2,
        records_per_file=64,
        seq_len_distribution="bimodal",
        short_len=16,
        long_len=480,
        seed=11,
    )
    manifest = generate_synthetic(spec, tmp_path / "bimodal")
    return tmp_path / "bimodal", manifest


@pytest.fixture
def dispatcher_server(tmp_path):
    """A dispatcher on an ephemeral port with a fast liveness sweep."""
    from src.dispatcher.server import start_dispatcher

    server = start_dispatcher(
        tmp_path / "dispatcher.journal",
        heartbeat_interval_ms=100,
        worker_timeout_ms=1500,
        fsync=False,
    )
    yield server
    server.stop()


@pytest.fixture
def start_workers(dispatcher_server):
    """Starts workers against `dispatcher_server`; all are stopped on teardown."""
    from src.worker.service import Worker

    started = []

    def start(n=1, **kwargs):
        kwargs.setdefault("heartbeat_interval_ms", 50)
        workers = [Worker(dispatcher_server.address, **kwargs).start() for _ in range(n)]
        started.extend(workers)
        return workers

    yield start
    for worker in started:
        worker.stop()


@pytest.fixture
def client_options(dispatcher_server):
    return {"dispatcher_address": dispatcher_server.address, "poll_interval_ms": 50, "rpc_timeout_ms": 5000}
