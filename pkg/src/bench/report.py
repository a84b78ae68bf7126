# src/bench/report.py
"""Experiment metrics and their CSV, table and SVG renderings."""

import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel, Field, computed_field  # noqa: E402
from tabulate import tabulate  # noqa: E402

from src.core.errors import ConfigError, IoFailure  # noqa: E402

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "experiment_id",
    "n_W",
    "throughput_bps",
    "cost",
    "duplicates",
    "losses",
    "evictions",
    "padding_waste",
]

ReportFormat = Literal["csv", "table", "svg"]
_SUFFIX: Dict[str, str] = {"csv": ".csv", "table": ".txt", "svg": ".svg"}


class TimelineSample(BaseModel):
    t_s: float
    consumed_batches: int
    produced_batches: int


class MetricsReport(BaseModel):
    experiment_id: str
    mode: str
    n_W: int = Field(..., description="Remote workers; 0 for colocated and ideal runs.")
    n_T: int
    elapsed_s: float = 0.0
    per_client_bps: List[float] = Field(default_factory=list, description="Batches per second, per client.")
    per_client_batches: List[int] = Field(default_factory=list)
    batches_consumed: int = 0
    elements_consumed: int = 0
    batches_produced: int = Field(0, description="Batches produced by the workers for the experiment's jobs.")
    dataset_size: int = 0
    duplicates: int = 0
    losses: int = 0
    evictions: int = 0
    round_padding_waste: List[int] = Field(default_factory=list, description="Padding slots per step, all clients.")
    step_spread_ms: float = Field(0.0, description="Mean per-step spread of simulated step time across clients.")
    bucket_violations: int = Field(0, description="Steps whose batches came from more than one bucket.")
    cost: float = 0.0
    busy_work_rounds: int = 0
    dataset_seed: int = 0
    job_seed: int = 0
    recovery_consistent: Optional[bool] = Field(None, description="Set after a dispatcher restart.")
    events: List[str] = Field(default_factory=list)
    timeline: List[TimelineSample] = Field(default_factory=list)

    @computed_field
    @property
    def throughput_bps(self) -> float:
        """Aggregate throughput: the sum of the per-client throughputs."""
        return sum(self.per_client_bps)

    @computed_field
    @property
    def padding_waste(self) -> float:
        if not self.round_padding_waste:
            return 0.0
        return sum(self.round_padding_waste) / len(self.round_padding_waste)

    def csv_row(self) -> Dict[str, Union[str, int, float]]:
        return {column: getattr(self, column) for column in CSV_COLUMNS}


def to_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    return pd.DataFrame([r.csv_row() for r in reports], columns=CSV_COLUMNS)


def format_table(reports: Sequence[MetricsReport]) -> str:
    rows = [[r.csv_row()[c] for c in CSV_COLUMNS] for r in reports]
    return tabulate(rows, headers=CSV_COLUMNS, tablefmt="github", floatfmt=".3f")


def _plot(reports: Sequence[MetricsReport], path: Path) -> None:
    ordered = sorted(reports, key=lambda r: r.n_W)
    n_w = [r.n_W for r in ordered]
    plt.rcParams["svg.hashsalt"] = "datafeed"
    fig, ax_tp = plt.subplots(figsize=(6, 4))
    try:
        ax_tp.plot(n_w, [r.throughput_bps for r in ordered], marker="o", color="tab:blue", label="throughput")
        ax_tp.set_xlabel("workers")
        ax_tp.set_ylabel("throughput (batches/s)", color="tab:blue")
        ax_cost = ax_tp.twinx()
        ax_cost.plot(n_w, [r.cost for r in ordered], marker="s", color="tab:red", label="cost")
        ax_cost.set_ylabel("cost", color="tab:red")
        if ordered:
            ax_tp.set_title(ordered[0].experiment_id.rsplit("-w", 1)[0])
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)


def emit_report(
    reports: Union[MetricsReport, Sequence[MetricsReport]],
    fmt: ReportFormat,
    out_path: Union[str, Path],
) -> Path:
    """
    Writes `reports` to `out_path` as CSV, a text table or an SVG plot of
    throughput and cost against worker count. Output is deterministic.

    Raises:
        ConfigError: unknown format.
        IoFailure: the file cannot be written.
    """
    if isinstance(reports, MetricsReport):
        reports = [reports]
    if fmt not in _SUFFIX:
        raise ConfigError(f"unknown report format '{fmt}'")
    path = Path(out_path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            to_frame(reports).to_csv(path, index=False, lineterminator="\n")
        elif fmt == "table":
            path.write_text(format_table(reports) + "\n", encoding="utf-8")
        else:
            _plot(reports, path)
    except OSError as e:
        raise IoFailure(f"cannot write {fmt} report '{path}': {e}") from e
    logger.info(f"Wrote {fmt} report for {len(reports)} run(s) to '{path}'.")
    return path


def report_path(out_dir: Union[str, Path], stem: str, fmt: ReportFormat) -> Path:
    return Path(out_dir) / f"{stem}{_SUFFIX[fmt]}"
