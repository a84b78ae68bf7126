# src/core/dependencies.py
"""
Dependency Injection Providers for the dispatcher status API.

The `@lru_cache(maxsize=1)` decorator makes each provider run once; the
journal is recovered and the dispatcher started on first use, and the same
instance serves every later request.

`scripts/run_dispatcher.py` starts its own dispatcher and installs it with
`app.dependency_overrides[get_dispatcher]`; tests do the same.
"""

import logging
from functools import lru_cache

from config import settings
from src.dispatcher.server import DispatcherServer, start_dispatcher
from src.dispatcher.service import Dispatcher

logger = logging.getLogger(__name__)


@lru_cache(maxsize=1)
def get_dispatcher_server() -> DispatcherServer:
    """
    Recovers the dispatcher from its journal and serves it on
    `settings.DISPATCHER_PORT`.
    """
    logger.info(f"Starting dispatcher from journal: {settings.JOURNAL_PATH}")
    return start_dispatcher(
        settings.JOURNAL_PATH,
        host="0.0.0.0",
        port=settings.DISPATCHER_PORT,
        heartbeat_interval_ms=settings.HEARTBEAT_INTERVAL_MS,
        worker_timeout_ms=settings.WORKER_TIMEOUT_MS,
        fsync=settings.JOURNAL_FSYNC,
        handler_threads=settings.RPC_HANDLER_THREADS,
    )


def get_dispatcher() -> Dispatcher:
    """The dispatcher whose state the API reports on."""
    return get_dispatcher_server().dispatcher
