# scripts/bench.py
"""
Experiment harness and operator CLI.

Subcommands:
    run             Run one experiment from a flat key = value config file.
    sweep           Run a config across worker counts; writes CSV, table and SVG.
    cost            Evaluate the job cost model for key=value parameters.
    sharing-bounds  Best and worst processing cost of k jobs sharing a cache.
    generate        Only write the synthetic dataset of a config.

Usage:
    $ python scripts/bench.py run experiments/scale_out.cfg
    $ python scripts/bench.py sweep experiments/scale_out.cfg --workers 1,2,4,8
    $ python scripts/bench.py cost t=2 c_cpu=1 c_mem=0.5 c_acc=10 n_w=2 cpu_w=4 n_t=1 cpu_t=8 mem_w=2 mem_t=4
    $ python scripts/bench.py sharing-bounds 3 120 12 120
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List

# Ensure the 'src' directory is in the Python path to allow for absolute imports.
project_root = Path(__file__).parent.parent.resolve()
sys.path.append(str(project_root))

from pydantic import ValidationError  # noqa: E402

from config import settings  # noqa: E402
from src.bench.config import load_config  # noqa: E402
from src.bench.cost import CostParams, cost, sharing_cost_bounds  # noqa: E402
from src.bench.harness import run_experiment, sweep  # noqa: E402
from src.bench.report import emit_report, format_table, report_path  # noqa: E402
from src.core.errors import ConfigError, DataServiceError  # noqa: E402
from src.data_processing.synthetic import generate_synthetic  # noqa: E402

logging.basicConfig(level=settings.LOG_LEVEL, format='%(asctime)s - %(levelname)s - %(message)s')


def parse_pairs(pairs: List[str]) -> Dict[str, str]:
    values = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got '{pair}'")
        values[key.strip()] = value.strip()
    return values


def cmd_run(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    report = run_experiment(config, args.work_dir)
    for fmt in ("csv", "table"):
        emit_report(report, fmt, report_path(args.out_dir, config.experiment_id, fmt))
    report_path(args.out_dir, config.experiment_id, "csv").with_suffix(".json").write_text(
        report.model_dump_json(indent=2), encoding="utf-8"
    )
    print(format_table([report]))
    for event in report.events:
        print(f"  {event}")


def cmd_sweep(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    counts = [int(n) for n in args.workers.split(",") if n.strip()]
    reports = sweep(config, counts, args.work_dir)
    stem = f"{config.experiment_id}-sweep"
    for fmt in ("csv", "table", "svg"):
        emit_report(reports, fmt, report_path(args.out_dir, stem, fmt))
    print(format_table(reports))


def cmd_cost(args: argparse.Namespace) -> None:
    try:
        params = CostParams(**parse_pairs(args.params))
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    print(f"{cost(params):.12g}")


def cmd_sharing_bounds(args: argparse.Namespace) -> None:
    bounds = sharing_cost_bounds(args.k, args.cost, args.cache, args.dataset)
    print(f"best={bounds.best:.12g} worst={bounds.worst:.12g}")


def cmd_generate(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    out_dir = Path(args.out_dir or settings.DATA_DIR / config.experiment_id)
    manifest = generate_synthetic(config.dataset, out_dir, progress=True)
    logging.info(f"✅ Wrote {manifest.total_records} records in {len(manifest.files)} files to '{out_dir}'.")


def setup_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DataFeed experiment harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one experiment.")
    run.add_argument("config", help="Flat key = value experiment file.")
    run.add_argument("--out-dir", default=str(settings.REPORT_DIR), help="Report directory.")
    run.add_argument("--work-dir", default=None, help="Dataset and journal directory.")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="Run a config across worker counts.")
    sw.add_argument("config")
    sw.add_argument("--workers", default="1,2,4,8", help="Comma-separated worker counts.")
    sw.add_argument("--out-dir", default=str(settings.REPORT_DIR))
    sw.add_argument("--work-dir", default=None)
    sw.set_defaults(func=cmd_sweep)

    c = sub.add_parser("cost", help="Evaluate the cost model.")
    c.add_argument("params", nargs="*", help="key=value pairs of CostParams.")
    c.set_defaults(func=cmd_cost)

    sb = sub.add_parser("sharing-bounds", help="Cost bounds of k jobs sharing a cache.")
    sb.add_argument("k", type=int)
    sb.add_argument("cost", type=float, help="Cost of one pass.")
    sb.add_argument("cache", type=float, help="Cache size.")
    sb.add_argument("dataset", type=float, help="Dataset size.")
    sb.set_defaults(func=cmd_sharing_bounds)

    g = sub.add_parser("generate", help="Write the synthetic dataset of a config.")
    g.add_argument("config")
    g.add_argument("--out-dir", default=None)
    g.set_defaults(func=cmd_generate)
    return parser


if __name__ == '__main__':
    args = setup_arg_parser().parse_args()
    try:
        args.func(args)
    except DataServiceError as e:
        logging.error(f"{type(e).__name__}: {e}")
        sys.exit(1)
