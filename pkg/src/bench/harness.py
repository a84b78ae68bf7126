# src/bench/harness.py
"""
Experiment harness.

`run_experiment` generates the synthetic dataset, launches a dispatcher and
workers (child processes by default), runs one thread per training client,
samples worker statistics while the clients consume, optionally injects a
failure, tears everything down and assembles a `MetricsReport`.

Clients simulate a training step by sleeping `step_time_ms` scaled by the
batch's padded length over `max_len`, so batches of long sequences take
longer, as they would on an accelerator.
"""

import logging
import multiprocessing
import re
import socket
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from config import settings
from src.bench.busywork import calibrate_busy_work
from src.bench.config import ExperimentConfig
from src.bench.cost import CostParams, cost
from src.bench.report import MetricsReport, TimelineSample
from src.client.config import DistributeConfig
from src.client.stream import distribute
from src.core.binary import decode_map
from src.core.errors import (
    ConnectionLost,
    DataServiceError,
    ExperimentTimeout,
    LaunchFailure,
    RpcTimeout,
    UnknownJob,
    UnknownTarget,
)
from src.data_processing.records import make_key
from src.data_processing.synthetic import DatasetManifest, generate_synthetic
from src.dispatcher.journal import parse_journal
from src.dispatcher.server import DispatcherServer, start_dispatcher
from src.dispatcher.state import DispatcherState
from src.pipeline.elements import Batch
from src.pipeline.engine import instantiate
from src.pipeline.graph import DatasetGraph, Pipeline
from src.wire.messages import CacheStatsRequest, CacheStatsResponse, GetStateRequest, StateDump
from src.wire.transport import RpcClient, call, close_clients, parse_address
from src.worker.service import LOCAL_SCHEME, LOCAL_WORKERS, Worker

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
WORKER_TARGET = re.compile(r"^worker:(\d+)$")
DISPATCHER_TARGET = "dispatcher"

READY_TIMEOUT_S = 20.0
SAMPLE_INTERVAL_S = 0.2
GIB = float(1 << 30)
SECONDS_PER_HOUR = 3600.0


# --- child process entry points ---
def _dispatcher_main(journal_path: str, port: int, heartbeat_interval_ms: int, worker_timeout_ms: int) -> None:
    logging.basicConfig(level=settings.LOG_LEVEL, format=LOG_FORMAT)
    start_dispatcher(
        journal_path,
        port=port,
        heartbeat_interval_ms=heartbeat_interval_ms,
        worker_timeout_ms=worker_timeout_ms,
        fsync=False,
    )
    threading.Event().wait()


def _worker_main(
    dispatcher_address: str,
    buffer_batches: int,
    window_batches: int,
    heartbeat_interval_ms: int,
) -> None:
    logging.basicConfig(level=settings.LOG_LEVEL, format=LOG_FORMAT)
    Worker(
        dispatcher_address,
        buffer_batches=buffer_batches,
        window_batches=window_batches,
        heartbeat_interval_ms=heartbeat_interval_ms,
    ).start()
    threading.Event().wait()


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# --- topology ---
class Topology:
    """
    The dispatcher and workers of one experiment.

    With `config.processes` every component is a child process and failures
    are SIGKILLs; otherwise components run in this process and a failure
    stops them abruptly.
    """

    def __init__(self, config: ExperimentConfig, work_dir: Path):
        self.config = config
        self.journal_path = work_dir / "dispatcher.journal"
        self.dispatcher_port = 0
        self.events: List[str] = []
        self.dispatcher_restarts = 0
        self.workers: List[Union[Worker, multiprocessing.Process, None]] = []
        self._server: Optional[DispatcherServer] = None
        self._dispatcher_proc: Optional[multiprocessing.Process] = None
        self._ctx = multiprocessing.get_context("spawn")
        self._timers: List[threading.Timer] = []
        self._t0 = time.monotonic()

    @property
    def dispatcher_address(self) -> str:
        return f"127.0.0.1:{self.dispatcher_port}"

    def log_event(self, text: str) -> None:
        self.events.append(f"{time.monotonic() - self._t0:.3f}s {text}")
        logger.info(text)

    def start(self) -> "Topology":
        """
        Raises:
            LaunchFailure: a component did not come up in time.
        """
        self.journal_path.parent.mkdir(parents=True, exist_ok=True)
        self.journal_path.unlink(missing_ok=True)
        self.start_dispatcher()
        if self.config.mode == "colocated":
            self.workers.append(self._launch_worker(local=True))
        else:
            for _ in range(self.config.num_workers):
                self.workers.append(self._launch_worker())
        self.wait_for_workers(len(self.workers))
        self.log_event(f"Topology up: dispatcher at {self.dispatcher_address}, {len(self.workers)} worker(s).")
        return self

    def start_dispatcher(self) -> None:
        c = self.config
        if c.processes:
            if not self.dispatcher_port:
                self.dispatcher_port = free_port()
            proc = self._ctx.Process(
                target=_dispatcher_main,
                args=(str(self.journal_path), self.dispatcher_port, c.heartbeat_interval_ms, c.worker_timeout_ms),
                name="dispatcher",
                daemon=True,
            )
            proc.start()
            self._dispatcher_proc = proc
        else:
            self._server = start_dispatcher(
                self.journal_path,
                port=self.dispatcher_port,
                heartbeat_interval_ms=c.heartbeat_interval_ms,
                worker_timeout_ms=c.worker_timeout_ms,
                fsync=False,
            )
            self.dispatcher_port = parse_address(self._server.address)[1]
        self._wait_for_dispatcher()

    def _launch_worker(self, local: bool = False) -> Union[Worker, multiprocessing.Process]:
        c = self.config
        if c.processes and not local:
            proc = self._ctx.Process(
                target=_worker_main,
                args=(self.dispatcher_address, c.buffer_batches, c.window_batches, c.heartbeat_interval_ms),
                name="worker",
                daemon=True,
            )
            proc.start()
            return proc
        return Worker(
            self.dispatcher_address,
            buffer_batches=c.buffer_batches,
            window_batches=c.window_batches,
            heartbeat_interval_ms=c.heartbeat_interval_ms,
            local=local,
        ).start()

    def dispatcher_state(self, timeout: float = 2.0) -> Tuple[Dict, bytes]:
        client = RpcClient(self.dispatcher_address, timeout=timeout)
        try:
            dump: StateDump = client.call(GetStateRequest())
        finally:
            client.close()
        state, _ = decode_map(dump.state)
        return state, dump.state

    def _wait_for_dispatcher(self) -> None:
        deadline = time.monotonic() + READY_TIMEOUT_S
        while time.monotonic() < deadline:
            try:
                self.dispatcher_state(timeout=1.0)
                return
            except (ConnectionLost, RpcTimeout):
                time.sleep(0.05)
        raise LaunchFailure(f"dispatcher at {self.dispatcher_address} did not start")

    def wait_for_workers(self, count: int) -> None:
        deadline = time.monotonic() + READY_TIMEOUT_S
        while time.monotonic() < deadline:
            state, _ = self.dispatcher_state()
            if sum(1 for w in state["workers"] if w["alive"]) >= count:
                return
            time.sleep(0.05)
        raise LaunchFailure(f"{count} worker(s) did not register with {self.dispatcher_address}")

    # --- failures ---
    def check_target(self, target: str) -> None:
        if target == DISPATCHER_TARGET:
            return
        match = WORKER_TARGET.match(target)
        if match is None or int(match.group(1)) >= len(self.workers):
            raise UnknownTarget(f"no failure target '{target}' among {len(self.workers)} worker(s)")

    def inject_failure(self, target: str, restart_after_ms: Optional[float] = None) -> None:
        """
        Kills `target` now and, if `restart_after_ms` is set, restarts it
        after that delay.

        Raises:
            UnknownTarget: no such worker, or an unknown target name.
        """
        self.check_target(target)
        if target == DISPATCHER_TARGET:
            self._kill_dispatcher()
        else:
            self._kill_worker(int(WORKER_TARGET.match(target).group(1)))
        self.log_event(f"Killed {target}.")
        if restart_after_ms is not None:
            timer = threading.Timer(restart_after_ms / 1000.0, self._restart, args=(target,))
            timer.daemon = True
            self._timers.append(timer)
            timer.start()

    def _kill_dispatcher(self) -> None:
        if self._dispatcher_proc is not None:
            self._dispatcher_proc.kill()
            self._dispatcher_proc.join()
            self._dispatcher_proc = None
        if self._server is not None:
            self._server.stop()
            self._server = None

    def _kill_worker(self, index: int) -> None:
        worker = self.workers[index]
        if isinstance(worker, Worker):
            worker.stop()
        elif worker is not None:
            worker.kill()
            worker.join()
        self.workers[index] = None

    def _restart(self, target: str) -> None:
        try:
            if target == DISPATCHER_TARGET:
                self.start_dispatcher()
                self.dispatcher_restarts += 1
            else:
                index = int(WORKER_TARGET.match(target).group(1))
                self.workers[index] = self._launch_worker(local=self.config.mode == "colocated")
            self.log_event(f"Restarted {target}.")
        except DataServiceError as e:
            self.log_event(f"Restart of {target} failed: {e}")

    def verify_recovery(self) -> bool:
        """True if the live dispatcher state equals the fold of its journal up to the same record."""
        state, dump = self.dispatcher_state()
        records, _ = parse_journal(self.journal_path.read_bytes())
        replayed = DispatcherState.replay([r for r in records if r.seq <= state["last_seq"]])
        return replayed.canonical_dump() == dump

    def stop(self) -> None:
        for timer in self._timers:
            timer.cancel()
        for index in range(len(self.workers)):
            self._kill_worker(index)
        self._kill_dispatcher()
        self.log_event("Topology stopped.")


# --- statistics ---
@dataclass
class WorkerSample:
    first_t: float
    first_cpu: float
    last_t: float
    last_cpu: float
    rss_total: float = 0.0
    samples: int = 0
    produced: int = 0
    evictions: int = 0


class StatsSampler(threading.Thread):
    """Polls every live worker's CacheStats for the experiment's jobs."""

    def __init__(self, topology: Topology, clients: Sequence["ClientRunner"], interval_s: float = SAMPLE_INTERVAL_S):
        super().__init__(name="stats-sampler", daemon=True)
        self.topology = topology
        self.clients = clients
        self.interval_s = interval_s
        self.workers: Dict[str, WorkerSample] = {}
        self.timeline: List[TimelineSample] = []
        self._halt = threading.Event()
        self._t0 = time.monotonic()

    def _stats(self, address: str, job_id: int) -> CacheStatsResponse:
        if address.startswith(LOCAL_SCHEME):
            worker = LOCAL_WORKERS.get(address)
            if worker is None:
                raise ConnectionLost(f"local worker {address} is gone")
            return worker.cache_stats(job_id)
        return call(address, CacheStatsRequest(job_id=job_id), timeout=1.0)

    def sample(self) -> None:
        job_ids = {c.job_id for c in self.clients if c.job_id is not None}
        if not job_ids:
            return
        try:
            state, _ = self.topology.dispatcher_state(timeout=1.0)
        except (ConnectionLost, RpcTimeout):
            return
        now = time.monotonic()
        for w in state["workers"]:
            if not w["alive"]:
                continue
            for job_id in job_ids:
                try:
                    stats = self._stats(w["address"], job_id)
                except (ConnectionLost, RpcTimeout, UnknownJob):
                    continue
                key = f"{w['address']}/{job_id}"
                s = self.workers.get(key)
                if s is None:
                    s = self.workers[key] = WorkerSample(now, stats.cpu_seconds, now, stats.cpu_seconds)
                s.last_t, s.last_cpu = now, stats.cpu_seconds
                s.rss_total += stats.rss_bytes
                s.samples += 1
                s.produced = max(s.produced, stats.produced)
                s.evictions = max(s.evictions, stats.evictions)
        self.timeline.append(TimelineSample(
            t_s=round(now - self._t0, 3),
            consumed_batches=sum(c.batches for c in self.clients),
            produced_batches=self.produced,
        ))

    @property
    def produced(self) -> int:
        return sum(s.produced for s in self.workers.values())

    @property
    def evictions(self) -> int:
        return sum(s.evictions for s in self.workers.values())

    def mean_usage(self) -> Tuple[float, float]:
        """Mean CPU cores and GiB of memory per worker over the sampled period."""
        if not self.workers:
            return 0.0, 0.0
        cores = []
        mem = []
        for s in self.workers.values():
            span = s.last_t - s.first_t
            cores.append((s.last_cpu - s.first_cpu) / span if span > 0 else 0.0)
            mem.append(s.rss_total / s.samples / GIB if s.samples else 0.0)
        return sum(cores) / len(cores), sum(mem) / len(mem)

    def run(self) -> None:
        while not self._halt.wait(self.interval_s):
            try:
                self.sample()
            except DataServiceError as e:
                logger.debug(f"Stats sample failed: {e}")

    def stop(self) -> None:
        self._halt.set()
        if self.is_alive():
            self.join(timeout=5)
        close_clients()


# --- clients ---
@dataclass
class StepRecord:
    step: int
    bucket_id: Optional[int]
    padding_waste: int
    step_ms: float


class ClientRunner(threading.Thread):
    """One simulated training client."""

    def __init__(
        self,
        index: int,
        config: ExperimentConfig,
        graph: DatasetGraph,
        dispatcher_address: str,
        stop_event: threading.Event,
    ):
        super().__init__(name=f"client-{index}", daemon=True)
        self.index = index
        self.config = config
        self.graph = graph
        self.dispatcher_address = dispatcher_address
        self.stop_event = stop_event
        self.keys: Counter = Counter()
        self.steps: List[StepRecord] = []
        self.batches = 0
        self.elements = 0
        self.elapsed = 0.0
        self.job_id: Optional[int] = None
        self.error: Optional[BaseException] = None

    def distribute_config(self) -> DistributeConfig:
        c = self.config
        return DistributeConfig.create(
            dispatcher_address=self.dispatcher_address,
            job_name=c.effective_job_name,
            sharding_policy=c.policy,
            sharing=c.sharing,
            read_sources="local" if c.mode == "colocated" else "remote",
            num_consumers=c.num_clients if c.coordinated else None,
            consumer_index=self.index if c.coordinated else None,
            buffer_capacity=c.buffer_batches,
            fetch_parallelism=c.fetch_parallelism,
            num_epochs=c.num_epochs,
            seed=c.job_seed,
            latency_ms=c.latency_ms,
            poll_interval_ms=c.heartbeat_interval_ms,
        )

    def _budget_spent(self, started: float) -> bool:
        c = self.config
        if c.element_budget is not None and self.elements >= c.element_budget:
            return True
        return c.duration_s is not None and time.monotonic() - started >= c.duration_s

    def consume(self, batches: Iterable[Batch], started: float) -> None:
        max_len = self.config.step_max_len
        for batch in batches:
            step_ms = self.config.step_time_ms * batch.padded_len / max_len
            if step_ms > 0:
                time.sleep(step_ms / 1000.0)
            step = batch.producer_round if batch.producer_round is not None else self.batches
            self.steps.append(StepRecord(step, batch.bucket_id, batch.padding_waste, step_ms))
            self.keys.update(batch.keys)
            self.batches += 1
            self.elements += len(batch.elements)
            if self.stop_event.is_set() or self._budget_spent(started):
                break

    def run(self) -> None:
        started = time.monotonic()
        try:
            if self.config.mode == "ideal":
                with instantiate(self.graph, seed=self.config.job_seed) as stream:
                    self.consume(stream, started)
            else:
                with distribute(self.graph, self.distribute_config()) as stream:
                    self.job_id = stream.job_id
                    self.consume(stream, started)
        except Exception as e:
            self.error = e
            logger.error(f"Client {self.index} failed: {e}", exc_info=True)
        finally:
            self.elapsed = time.monotonic() - started


# --- assembly ---
def build_pipeline(config: ExperimentConfig, dataset_dir: Union[str, Path], busy_rounds: int) -> Pipeline:
    pipeline = Pipeline.records(str(dataset_dir))
    if busy_rounds:
        pipeline = pipeline.map("burn_cpu", fn_arg=busy_rounds)
    if config.bucket_boundaries:
        pipeline = pipeline.bucket_by_sequence_length(config.bucket_boundaries, config.batch_size)
    else:
        pipeline = pipeline.batch(config.batch_size)
    pipeline = pipeline.prefetch(2)
    if config.mode == "ideal":
        pipeline = pipeline.take(1).cache().repeat()
    return pipeline


def dataset_keys(manifest: DatasetManifest) -> List[int]:
    return [make_key(i, ordinal) for i, f in enumerate(manifest.files) for ordinal in range(f.count)]


def visitation(consumed: Counter, expected_keys: Iterable[int], passes: int = 1) -> Tuple[int, int]:
    """
    Compares consumed keys with the dataset.

    Returns:
        (duplicates, losses): visits beyond `passes` per key, and missing
        visits of dataset keys.
    """
    expected = set(expected_keys)
    duplicates = sum(max(0, n - passes) for n in consumed.values())
    losses = sum(max(0, passes - consumed.get(k, 0)) for k in expected)
    return duplicates, losses


def step_metrics(clients: Sequence[ClientRunner]) -> Tuple[List[int], float, int]:
    """Per-step padding waste, mean per-step spread of step time, and mixed-bucket steps."""
    by_step: Dict[int, List[StepRecord]] = defaultdict(list)
    for client in clients:
        for record in client.steps:
            by_step[record.step].append(record)
    waste: List[int] = []
    spreads: List[float] = []
    violations = 0
    for step in sorted(by_step):
        records = by_step[step]
        waste.append(sum(r.padding_waste for r in records))
        if len(records) > 1:
            spreads.append(max(r.step_ms for r in records) - min(r.step_ms for r in records))
            if len({r.bucket_id for r in records}) > 1:
                violations += 1
    return waste, (sum(spreads) / len(spreads) if spreads else 0.0), violations


class FailureWatch(threading.Thread):
    """Fires the configured failure once its trigger is reached."""

    def __init__(self, topology: Topology, clients: Sequence[ClientRunner], dataset_size: int, stop: threading.Event):
        super().__init__(name="failure-watch", daemon=True)
        self.topology = topology
        self.clients = clients
        self.dataset_size = dataset_size
        self._halt = stop
        self.fired = False

    def _due(self, started: float) -> bool:
        c = self.topology.config
        if c.failure_at_s is not None and time.monotonic() - started >= c.failure_at_s:
            return True
        consumed = sum(client.elements for client in self.clients)
        return c.failure_at_fraction is not None and consumed >= c.failure_at_fraction * self.dataset_size

    def run(self) -> None:
        started = time.monotonic()
        c = self.topology.config
        while not self._halt.wait(0.01):
            if self._due(started):
                self.topology.inject_failure(c.failure_target, c.failure_restart_after_ms)
                self.fired = True
                return


def run_experiment(config: ExperimentConfig, work_dir: Union[str, Path, None] = None) -> MetricsReport:
    """
    Runs one experiment end to end.

    Raises:
        LaunchFailure: the dispatcher or a worker did not start.
        ExperimentTimeout: clients were still running after `timeout_s`.
        UnknownTarget: the failure target names no component.
    """
    work_dir = Path(work_dir or settings.DATA_DIR / "experiments") / config.experiment_id
    logger.info(f"Experiment '{config.experiment_id}': mode={config.mode}, n_W={config.num_workers}, n_T={config.num_clients}.")
    manifest = generate_synthetic(config.dataset, work_dir / "dataset")
    rounds = config.busy_work_rounds if config.busy_work_rounds is not None else calibrate_busy_work(config.busy_work_ms)
    graph = build_pipeline(config, work_dir / "dataset", rounds).build()

    topology: Optional[Topology] = None
    if config.mode != "ideal":
        topology = Topology(config, work_dir)
        try:
            topology.start()
            if config.failure_target is not None:
                topology.check_target(config.failure_target)
        except Exception:
            topology.stop()
            raise

    stop = threading.Event()
    address = topology.dispatcher_address if topology else ""
    clients = [ClientRunner(i, config, graph, address, stop) for i in range(config.num_clients)]
    sampler = StatsSampler(topology, clients) if topology else None
    watch = None
    if topology is not None and config.failure_target is not None:
        watch = FailureWatch(topology, clients, manifest.total_records, stop)

    started = time.monotonic()
    for client in clients:
        client.start()
    for thread in (sampler, watch):
        if thread is not None:
            thread.start()
    deadline = started + config.timeout_s
    for client in clients:
        client.join(max(0.0, deadline - time.monotonic()))
    timed_out = any(client.is_alive() for client in clients)
    stop.set()
    elapsed = time.monotonic() - started

    recovery_consistent = None
    events: List[str] = []
    if topology is not None:
        sampler.sample()
        sampler.stop()
        if watch is not None:
            watch.join(timeout=1)
        if topology.dispatcher_restarts:
            try:
                recovery_consistent = topology.verify_recovery()
            except DataServiceError as e:
                topology.log_event(f"Recovery check failed: {e}")
                recovery_consistent = False
        topology.stop()
        events = topology.events
    if timed_out:
        raise ExperimentTimeout(f"experiment '{config.experiment_id}' exceeded {config.timeout_s}s")
    failed = [c for c in clients if c.error is not None]
    if failed:
        raise failed[0].error

    keys = dataset_keys(manifest)
    if config.sharing:
        pairs = [visitation(c.keys, keys, config.num_epochs) for c in clients]
        duplicates, losses = sum(p[0] for p in pairs), sum(p[1] for p in pairs)
    else:
        total: Counter = Counter()
        for c in clients:
            total.update(c.keys)
        duplicates, losses = visitation(total, keys, config.num_epochs)
    waste, spread, violations = step_metrics(clients)

    n_w = config.num_workers if config.mode == "remote" else 0
    cpu_w, mem_w = sampler.mean_usage() if sampler else (0.0, 0.0)
    job_cost = cost(CostParams(
        t=elapsed / SECONDS_PER_HOUR,
        n_w=n_w,
        n_t=config.num_clients,
        n_acc_per_t=config.acc_per_client,
        c_cpu=config.c_cpu,
        c_mem=config.c_mem,
        c_acc=config.c_acc,
        cpu_w=cpu_w,
        mem_w=mem_w,
        cpu_t=config.client_cpu,
        mem_t=config.client_mem_gib,
    ))
    report = MetricsReport(
        experiment_id=config.experiment_id,
        mode=config.mode,
        n_W=n_w,
        n_T=config.num_clients,
        elapsed_s=elapsed,
        per_client_bps=[c.batches / c.elapsed if c.elapsed > 0 else 0.0 for c in clients],
        per_client_batches=[c.batches for c in clients],
        batches_consumed=sum(c.batches for c in clients),
        elements_consumed=sum(c.elements for c in clients),
        batches_produced=sampler.produced if sampler else 0,
        dataset_size=manifest.total_records,
        duplicates=duplicates,
        losses=losses,
        evictions=sampler.evictions if sampler else 0,
        round_padding_waste=waste,
        step_spread_ms=spread,
        bucket_violations=violations,
        cost=job_cost,
        busy_work_rounds=rounds,
        dataset_seed=config.dataset.seed,
        job_seed=config.job_seed,
        recovery_consistent=recovery_consistent,
        events=events,
        timeline=sampler.timeline if sampler else [],
    )
    logger.info(
        f"Experiment '{config.experiment_id}' done: {report.throughput_bps:.2f} batches/s, "
        f"{duplicates} duplicate(s), {losses} loss(es), cost {job_cost:.6f}."
    )
    return report


def sweep(
    config: ExperimentConfig,
    worker_counts: Sequence[int],
    work_dir: Union[str, Path, None] = None,
) -> List[MetricsReport]:
    """Runs `config` once per worker count, in remote mode."""
    reports = []
    for n in tqdm(worker_counts, desc="Worker sweep"):
        run_config = config.model_copy(update={
            "mode": "remote",
            "num_workers": n,
            "experiment_id": f"{config.experiment_id}-w{n}",
        })
        reports.append(run_experiment(run_config, work_dir))
    return reports
