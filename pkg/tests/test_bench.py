# tests/test_bench.py
import time
from collections import Counter
from pathlib import Path

import pytest

from src.bench.busywork import calibrate_busy_work
from src.bench.config import build_config, load_config, parse_config_text
from src.bench.cost import CostParams, cost, sharing_cost_bounds
from src.bench.harness import Topology, build_pipeline, dataset_keys, run_experiment, visitation
from src.bench.report import CSV_COLUMNS, MetricsReport, emit_report, format_table
from src.core.errors import ConfigError, InvalidSizes, IoFailure, NegativeParam, UnknownTarget
from src.data_processing.records import make_key
from src.data_processing.synthetic import SyntheticSpec, generate_synthetic
from src.pipeline.graph import OperatorKind
from src.worker.service import Worker

EXPERIMENTS = Path(__file__).parent.parent / "experiments"


# --- cost model ---
def test_cost_matches_hand_evaluation():
    p = CostParams(
        t=2, c_cpu=1, c_mem=0.5, c_acc=10,
        n_w=2, cpu_w=4, mem_w=2,
        n_t=1, cpu_t=8, mem_t=4, n_acc_per_t=1,
    )
    assert cost(p) == pytest.approx(60.0)


def test_cost_without_workers_counts_only_clients():
    p = CostParams(t=3, c_cpu=2, c_mem=1, c_acc=5, n_w=0, cpu_w=100, n_t=2, cpu_t=1, mem_t=1, n_acc_per_t=1)
    assert cost(p) == pytest.approx(3 * (2 * 2 + 1 * 2 + 5 * 2))


def test_cost_is_zero_when_everything_is_free():
    p = CostParams(t=10, c_cpu=0, c_mem=0, c_acc=0, n_w=4, cpu_w=3, n_t=2, cpu_t=8)
    assert cost(p) == 0


def test_negative_cost_parameter():
    with pytest.raises(NegativeParam, match="cpu_w"):
        cost(CostParams(t=1, cpu_w=-1))


def test_sharing_bounds():
    bounds = sharing_cost_bounds(3, 120, 12, 120)
    assert bounds.best == pytest.approx(120)
    assert bounds.worst == pytest.approx(336)


@pytest.mark.parametrize("k, cache, dataset", [(1, 5, 50), (4, 50, 50)])
def test_sharing_bounds_collapse_to_one_pass(k, cache, dataset):
    assert sharing_cost_bounds(k, 80, cache, dataset) == (80, 80)


@pytest.mark.parametrize("k, cache, dataset", [(0, 1, 10), (2, 0, 10), (2, 11, 10)])
def test_sharing_bounds_reject_invalid_sizes(k, cache, dataset):
    with pytest.raises(InvalidSizes):
        sharing_cost_bounds(k, 1, cache, dataset)


def test_zero_busy_work_needs_no_calibration():
    assert calibrate_busy_work(0) == 0


# --- experiment config ---
CONFIG_TEXT = """
# scale-out run
experiment_id = scale-out
mode = remote
num_workers = 4
busy_work_ms = 5
batch_size = 32
bucket_boundaries = 64, 128
dataset.num_files = 16
dataset.records_per_file = 128
dataset.seed = 7
"""


def test_parse_config_text():
    config = parse_config_text(CONFIG_TEXT)
    assert config.experiment_id == "scale-out"
    assert config.num_workers == 4
    assert config.busy_work_ms == 5.0
    assert config.bucket_boundaries == [64, 128]
    assert config.dataset.num_files == 16
    assert config.dataset.seed == 7
    assert config.dataset.payload_bytes_max == 64
    assert config.effective_job_name == "scale-out"


@pytest.mark.parametrize("text", [
    "num_workers",
    "= 3",
    "unknown_key = 1",
    "mode = cloud",
    "num_workers = -1",
    "mode = remote\nnum_workers = 0",
    "sharing = true\ncoordinated = true",
    "mode = ideal",
    "failure_target = worker:1",
    "failure_target = node:1\nfailure_at_s = 1",
])
def test_invalid_config(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_step_max_len_defaults_to_longest_sequence():
    uniform = build_config(dataset=SyntheticSpec(num_files=1, records_per_file=1, seq_len_max=200))
    bimodal = build_config(
        dataset=SyntheticSpec(num_files=1, records_per_file=1, seq_len_distribution="bimodal", long_len=300)
    )
    assert uniform.step_max_len == 200
    assert bimodal.step_max_len == 300
    assert build_config(max_len=50).step_max_len == 50


def test_shipped_experiment_configs_load():
    for name in ("scale_out", "coordinated", "sharing", "worker_failure"):
        config = load_config(EXPERIMENTS / f"{name}.cfg")
        assert config.experiment_id


def test_missing_config_file(tmp_path):
    with pytest.raises(IoFailure):
        load_config(tmp_path / "absent.cfg")


# --- reports ---
def _report(n_w, bps):
    return MetricsReport(
        experiment_id=f"sweep-w{n_w}",
        mode="remote",
        n_W=n_w,
        n_T=2,
        per_client_bps=bps,
        round_padding_waste=[2, 4],
        cost=0.5 * n_w,
    )


def test_aggregate_throughput_and_padding_waste():
    report = _report(2, [3.0, 4.5])
    assert report.throughput_bps == pytest.approx(7.5)
    assert report.padding_waste == pytest.approx(3.0)
    assert MetricsReport(experiment_id="x", mode="remote", n_W=1, n_T=1).padding_waste == 0.0


def test_empty_report_is_header_only_csv(tmp_path):
    path = emit_report([], "csv", tmp_path / "empty.csv")
    assert path.read_text(encoding="utf-8") == ",".join(CSV_COLUMNS) + "\n"


def test_csv_has_one_row_per_run(tmp_path):
    path = emit_report([_report(1, [1.0]), _report(2, [2.0])], "csv", tmp_path / "sweep.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("sweep-w1,1,1.0,")


@pytest.mark.parametrize("fmt", ["csv", "table", "svg"])
def test_reports_are_deterministic(tmp_path, fmt):
    reports = [_report(1, [1.0, 1.5]), _report(4, [3.5, 3.0])]
    first = emit_report(reports, fmt, tmp_path / "a" / "out").read_bytes()
    second = emit_report(reports, fmt, tmp_path / "b" / "out").read_bytes()
    assert first == second
    assert first


def test_table_lists_every_column():
    table = format_table([_report(1, [1.0])])
    for column in CSV_COLUMNS:
        assert column in table


def test_unknown_report_format(tmp_path):
    with pytest.raises(ConfigError):
        emit_report([], "pdf", tmp_path / "out.pdf")


# --- harness ---
def test_visitation_counts_duplicates_and_losses():
    consumed = Counter({1: 1, 2: 3, 9: 1})
    assert visitation(consumed, [1, 2, 3]) == (2, 1)
    assert visitation(Counter({1: 2, 2: 2}), [1, 2], passes=2) == (0, 0)


def test_dataset_keys_cover_every_record(tmp_path):
    manifest = generate_synthetic(SyntheticSpec(num_files=2, records_per_file=3), tmp_path)
    keys = dataset_keys(manifest)
    assert len(keys) == 6
    assert keys[3] == make_key(1, 0)


def test_ideal_pipeline_repeats_the_first_batch(tmp_path):
    config = build_config(mode="ideal", element_budget=8, batch_size=4)
    kinds = build_pipeline(config, tmp_path, busy_rounds=10).build().kinds()
    assert kinds[-3:] == [OperatorKind.TAKE, OperatorKind.CACHE, OperatorKind.REPEAT]
    assert OperatorKind.MAP in kinds


def test_ideal_run_stops_at_the_element_budget(tmp_path):
    config = build_config(
        experiment_id="ideal",
        mode="ideal",
        element_budget=20,
        batch_size=4,
        dataset=SyntheticSpec(num_files=1, records_per_file=8, seq_len_max=16),
    )
    report = run_experiment(config, tmp_path)
    assert report.n_W == 0
    assert report.batches_consumed == 5
    assert report.elements_consumed == 20
    assert report.dataset_size == 8
    assert report.throughput_bps == pytest.approx(sum(report.per_client_bps))


def test_unknown_failure_target(tmp_path):
    topology = Topology(build_config(num_workers=2), tmp_path)
    topology.workers = [None, None]
    topology.check_target("dispatcher")
    topology.check_target("worker:1")
    with pytest.raises(UnknownTarget):
        topology.check_target("worker:9")
    with pytest.raises(UnknownTarget):
        topology.inject_failure("worker:2")


@pytest.mark.slow
def test_remote_dynamic_run_visits_every_element_once(tmp_path):
    config = build_config(
        experiment_id="remote",
        mode="remote",
        processes=False,
        num_workers=2,
        batch_size=4,
        policy="DYNAMIC",
        heartbeat_interval_ms=50,
        timeout_s=60,
        dataset=SyntheticSpec(num_files=2, records_per_file=16, seq_len_max=32),
    )
    report = run_experiment(config, tmp_path)
    assert report.n_W == 2
    assert (report.duplicates, report.losses) == (0, 0)
    assert report.elements_consumed == 32
    assert report.batches_consumed == 8
    assert any("Topology up" in e for e in report.events)


def _failure_config(**overrides):
    values = dict(
        mode="remote",
        processes=False,
        num_workers=3,
        batch_size=4,
        busy_work_ms=2,
        policy="DYNAMIC",
        heartbeat_interval_ms=50,
        worker_timeout_ms=2000,
        failure_at_fraction=0.25,
        timeout_s=120,
        dataset=SyntheticSpec(num_files=24, records_per_file=32, seq_len_max=32),
    )
    values.update(overrides)
    return build_config(**values)


@pytest.mark.slow
def test_killed_worker_loses_at_most_its_shard_and_buffer(tmp_path):
    config = _failure_config(experiment_id="kill-worker", failure_target="worker:1", worker_timeout_ms=500)
    report = run_experiment(config, tmp_path)
    assert any("Killed worker:1" in e for e in report.events)
    assert report.duplicates == 0
    # One shard in flight, the worker buffer, prefetch(2) and the batch being served.
    buffered = (config.buffer_batches + 3) * config.batch_size
    assert report.losses <= config.dataset.records_per_file + buffered
    assert report.elements_consumed + report.losses == report.dataset_size


@pytest.mark.slow
def test_job_survives_a_dispatcher_restart(tmp_path):
    config = _failure_config(
        experiment_id="restart-dispatcher",
        failure_target="dispatcher",
        failure_restart_after_ms=300,
    )
    report = run_experiment(config, tmp_path)
    assert any("Killed dispatcher" in e for e in report.events)
    assert any("Restarted dispatcher" in e for e in report.events)
    assert report.recovery_consistent is True
    assert (report.duplicates, report.losses) == (0, 0)


@pytest.mark.slow
def test_injected_worker_failure_and_restart(tmp_path):
    config = build_config(num_workers=2, processes=False, heartbeat_interval_ms=50)
    topology = Topology(config, tmp_path).start()
    try:
        topology.inject_failure("worker:0", restart_after_ms=100)
        assert topology.workers[0] is None
        for _ in range(100):
            if any("Restarted worker:0" in e for e in topology.events):
                break
            time.sleep(0.05)
        assert isinstance(topology.workers[0], Worker)
        topology.wait_for_workers(2)
        assert [e.split(" ", 1)[1] for e in topology.events[-2:]] == ["Killed worker:0.", "Restarted worker:0."]
    finally:
        topology.stop()
