# src/bench/busywork.py
"""Calibration of the per-element CPU burn used by experiment pipelines."""

import logging
import time
from functools import lru_cache

from src.pipeline.elements import Element
from src.pipeline.functions import burn_cpu

logger = logging.getLogger(__name__)

_SAMPLE_ROUNDS = 2000


@lru_cache(maxsize=1)
def rounds_per_ms() -> float:
    """Hash rounds `burn_cpu` completes per millisecond on this host."""
    sample = Element(payload=b"", seq_len=0, key=1)
    burn_cpu(sample, 50)
    start = time.perf_counter()
    burn_cpu(sample, _SAMPLE_ROUNDS)
    elapsed_ms = max((time.perf_counter() - start) * 1000.0, 1e-6)
    rate = _SAMPLE_ROUNDS / elapsed_ms
    logger.info(f"Busy-work calibration: {rate:.1f} hash rounds per ms.")
    return rate


def calibrate_busy_work(ms: float) -> int:
    """
    Fixed number of `burn_cpu` rounds that takes about `ms` milliseconds here.

    The count, not the duration, goes into the pipeline, so the work per
    element is identical on every worker.
    """
    if ms <= 0:
        return 0
    return max(1, round(ms * rounds_per_ms()))
