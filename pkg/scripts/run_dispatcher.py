# scripts/run_dispatcher.py
"""
Standalone script running a DataFeed dispatcher.

The dispatcher recovers its state from the journal (truncating a torn final
record if the previous run crashed), serves workers and clients on the given
port, and optionally exposes the read-only status API over HTTP.

Usage:
    - Start with the defaults from config.py / .env:
      $ python scripts/run_dispatcher.py

    - Custom port and journal, with the status API on port 8000:
      $ python scripts/run_dispatcher.py --port 5050 --journal-path /tmp/dfs.journal --status-port 8000
"""

import argparse
import logging
import sys
import threading
from pathlib import Path

# Ensure the 'src' directory is in the Python path to allow for absolute imports.
project_root = Path(__file__).parent.parent.resolve()
sys.path.append(str(project_root))

import uvicorn  # noqa: E402

from config import settings  # noqa: E402
from src.core.errors import DataServiceError  # noqa: E402
from src.dispatcher.server import start_dispatcher  # noqa: E402

logging.basicConfig(level=settings.LOG_LEVEL, format='%(asctime)s - %(levelname)s - %(message)s')


def run_dispatcher(
    port: int,
    journal_path: Path,
    heartbeat_interval_ms: int,
    worker_timeout_ms: int,
    status_port: int = 0,
) -> int:
    """
    Runs the dispatcher until interrupted.

    Returns:
        int: Process exit code.
    """
    try:
        server = start_dispatcher(
            journal_path,
            host="0.0.0.0",
            port=port,
            heartbeat_interval_ms=heartbeat_interval_ms,
            worker_timeout_ms=worker_timeout_ms,
            fsync=settings.JOURNAL_FSYNC,
            handler_threads=settings.RPC_HANDLER_THREADS,
        )
    except DataServiceError as e:
        logging.error(f"Dispatcher failed to start: {e}")
        return 1

    try:
        if status_port:
            from src.core.dependencies import get_dispatcher
            from src.main import app

            app.dependency_overrides[get_dispatcher] = lambda: server.dispatcher
            logging.info(f"Status API on http://0.0.0.0:{status_port}/api/v1")
            uvicorn.run(app, host="0.0.0.0", port=status_port, log_level=settings.LOG_LEVEL.lower())
        else:
            threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        logging.info("Dispatcher stopped.")
    return 0


def setup_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run the DataFeed dispatcher.")
    parser.add_argument(
        '--port',
        type=int,
        default=settings.DISPATCHER_PORT,
        help=f"Port for workers and clients. Default: {settings.DISPATCHER_PORT}."
    )
    parser.add_argument(
        '--journal-path',
        type=str,
        default=str(settings.JOURNAL_PATH),
        help=f"Journal file. Default: '{settings.JOURNAL_PATH}'."
    )
    parser.add_argument(
        '--heartbeat-interval-ms',
        type=int,
        default=settings.HEARTBEAT_INTERVAL_MS,
        help="Liveness sweep period."
    )
    parser.add_argument(
        '--worker-timeout-ms',
        type=int,
        default=settings.WORKER_TIMEOUT_MS,
        help="Heartbeat silence after which a worker is declared dead."
    )
    parser.add_argument(
        '--status-port',
        type=int,
        default=0,
        help="Serve the HTTP status API on this port (0 disables it)."
    )
    return parser


if __name__ == '__main__':
    args = setup_arg_parser().parse_args()
    sys.exit(run_dispatcher(
        port=args.port,
        journal_path=Path(args.journal_path),
        heartbeat_interval_ms=args.heartbeat_interval_ms,
        worker_timeout_ms=args.worker_timeout_ms,
        status_port=args.status_port,
    ))
