# scripts/run_worker.py
"""
Standalone script running a DataFeed worker.

The worker registers with the dispatcher (retrying while it is unreachable),
runs the tasks it is assigned and serves batches to clients. It keeps no
state on disk, so it can be killed and restarted at any time.

Usage:
    $ python scripts/run_worker.py --dispatcher-addr 127.0.0.1:5050 --port 5100
"""

import argparse
import logging
import sys
import threading
from pathlib import Path

# Ensure the 'src' directory is in the Python path to allow for absolute imports.
project_root = Path(__file__).parent.parent.resolve()
sys.path.append(str(project_root))

from config import settings  # noqa: E402
from src.worker.service import Worker  # noqa: E402

logging.basicConfig(level=settings.LOG_LEVEL, format='%(asctime)s - %(levelname)s - %(message)s')


def setup_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run a DataFeed worker.")
    parser.add_argument(
        '--port',
        type=int,
        default=settings.WORKER_PORT,
        help="Port to serve clients on; 0 picks a free port."
    )
    parser.add_argument(
        '--host',
        type=str,
        default="127.0.0.1",
        help="Interface to serve on; also the address registered with the dispatcher."
    )
    parser.add_argument(
        '--dispatcher-addr',
        type=str,
        default=settings.DFS_DISPATCHER,
        help=f"Dispatcher host:port. Default: '{settings.DFS_DISPATCHER}'."
    )
    parser.add_argument(
        '--buffer-batches',
        type=int,
        default=settings.BUFFER_BATCHES,
        help="Produced-batch buffer per task."
    )
    parser.add_argument(
        '--window-batches',
        type=int,
        default=settings.WINDOW_BATCHES,
        help="Sliding-window size of shared tasks."
    )
    parser.add_argument(
        '--heartbeat-interval-ms',
        type=int,
        default=settings.HEARTBEAT_INTERVAL_MS,
        help="Heartbeat period."
    )
    return parser


if __name__ == '__main__':
    args = setup_arg_parser().parse_args()
    worker = Worker(
        args.dispatcher_addr,
        host=args.host,
        port=args.port,
        buffer_batches=args.buffer_batches,
        window_batches=args.window_batches,
        heartbeat_interval_ms=args.heartbeat_interval_ms,
        compression=settings.COMPRESSION,
        rpc_timeout_ms=settings.RPC_TIMEOUT_MS,
        handler_threads=settings.RPC_HANDLER_THREADS,
    ).start()
    logging.info(f"Worker serving on {worker.address}.")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        worker.stop()
