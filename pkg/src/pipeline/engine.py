# src/pipeline/engine.py
"""
Pull-based execution engine.

`instantiate` binds a graph to a source and a seed and returns an
`ElementStream`. Internally every operator is an "opener": a zero-argument
callable returning a fresh iterator over the operator's output. Re-opening is
what `repeat` and `cache` are built on.

Parallel maps keep results in a FIFO of futures in input order, so the output
sequence never depends on the parallelism setting.
"""

import logging
import queue
import random
import struct
import threading
from collections import Counter, deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import count as counter
from typing import Any, Callable, Deque, Dict, Iterable, Iterator, List, Optional, Tuple

from src.core.binary import fnv1a_64
from src.core.errors import FunctionFailure
from src.pipeline.bucketing import bucket_and_pad
from src.pipeline.elements import END_OF_DATA, Batch, Element, Window, range_element
from src.pipeline.functions import FLAT_MAP, MAP, PREDICATE, FunctionTable, default_functions
from src.pipeline.graph import SOURCE_RANGE, SOURCE_RECORDS, DatasetGraph, OperatorKind, OperatorSpec

logger = logging.getLogger(__name__)

Opener = Callable[[], Iterator[Any]]


@dataclass
class StreamStats:
    produced: int = 0
    skipped: Counter = field(default_factory=Counter)

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())


def mix_seed(*parts: int) -> int:
    return fnv1a_64(b"".join(struct.pack("<q", p & 0x7FFFFFFFFFFFFFFF) for p in parts))


def _close(it: Any) -> None:
    close = getattr(it, "close", None)
    if close is not None:
        close()


class _Failure:
    def __init__(self, error: BaseException):
        self.error = error


_DONE = object()


class ElementStream:
    """
    Single-consumer pull interface over an instantiated graph.

    `next()` returns the next item or END_OF_DATA; once END_OF_DATA has been
    returned every later call returns it again.
    """

    def __init__(self, opener: Opener, stats: StreamStats, fingerprint: int, seed: int):
        self._opener = opener
        self._it: Optional[Iterator[Any]] = None
        self._done = False
        self.stats = stats
        self.fingerprint = fingerprint
        self.seed = seed

    def next(self) -> Any:
        if self._done:
            return END_OF_DATA
        if self._it is None:
            self._it = self._opener()
        try:
            item = next(self._it)
        except StopIteration:
            self.close()
            return END_OF_DATA
        except BaseException:
            self.close()
            raise
        self.stats.produced += 1
        return item

    def __iter__(self) -> "ElementStream":
        return self

    def __next__(self) -> Any:
        item = self.next()
        if item is END_OF_DATA:
            raise StopIteration
        return item

    def close(self) -> None:
        self._done = True
        if self._it is not None:
            _close(self._it)
            self._it = None

    def __enter__(self) -> "ElementStream":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class _GraphExecutor:
    """Turns graph nodes into chained openers."""

    def __init__(self, functions: FunctionTable, stats: StreamStats, seed: int, fail_fast: bool):
        self.functions = functions
        self.stats = stats
        self.seed = seed
        self.fail_fast = fail_fast

    # --- failure policy ---
    def _failed(self, op: str, item: Any, error: BaseException) -> None:
        key = getattr(item, "key", None)
        if self.fail_fast:
            raise FunctionFailure(op, key, error) from error
        self.stats.skipped[op] += 1
        logger.warning(f"Skipping element {key}: {op} raised {error!r}")

    # --- assembly ---
    def build(self, graph: DatasetGraph, source: Optional[Iterable[Element]]) -> Opener:
        opener = self._source(graph.source, source)
        for index, node in enumerate(graph.nodes[1:], start=1):
            opener = self._wrap(index, node, opener)
        return opener

    def _source(self, node: OperatorSpec, source: Optional[Iterable[Element]]) -> Opener:
        if source is not None:
            return lambda: iter(source)
        if node.params["type"] == SOURCE_RANGE:
            start, end = node.params["start"], node.params["end"]
            return lambda: (range_element(i) for i in range(start, end))
        if node.params["type"] == SOURCE_RECORDS:
            from src.data_processing.records import RecordSource
            from src.data_processing.shards import FILE, enumerate_shards

            records = RecordSource(enumerate_shards(node.params["dataset_dir"], FILE))
            return lambda: iter(records)
        raise ValueError(f"unbound source {node.params}")

    def _wrap(self, index: int, node: OperatorSpec, upstream: Opener) -> Opener:
        p = node.params
        op = f"{node.kind.value}#{index}"
        kind = node.kind
        if kind == OperatorKind.MAP:
            fn = self.functions.resolve(p["fn"], MAP, p.get("fn_arg"))
            return lambda: self._ordered_map(upstream(), fn, op, p["parallelism"])
        if kind == OperatorKind.FILTER:
            predicate = self.functions.resolve(p["predicate"], PREDICATE)
            return lambda: self._filter(upstream(), predicate, op)
        if kind == OperatorKind.FUSED_MAP_FILTER:
            fn = self.functions.resolve(p["fn"], MAP, p.get("fn_arg"))
            predicate = self.functions.resolve(p["predicate"], PREDICATE)

            def fused(item: Any) -> Tuple[Any, bool]:
                out = fn(item)
                return out, bool(predicate(out))

            return lambda: self._fused(upstream, fused, op, p["parallelism"])
        if kind == OperatorKind.SHUFFLE:
            return self._shuffle(upstream, p["buffer_size"], p.get("seed", self.seed), index)
        if kind == OperatorKind.REPEAT:
            return lambda: self._repeat(upstream, p["count"])
        if kind == OperatorKind.BATCH:
            return lambda: self._batch(upstream(), p["batch_size"], p["drop_remainder"])
        if kind == OperatorKind.PAD:
            return lambda: (self._pad(item, p["unit_bytes"]) for item in upstream())
        if kind == OperatorKind.PREFETCH:
            return lambda: self._prefetch(upstream, p["buffer_size"])
        if kind == OperatorKind.BUCKET_BY_SEQUENCE_LENGTH:
            return lambda: bucket_and_pad(upstream(), p["bucket_boundaries"], p["batch_size"])
        if kind == OperatorKind.GROUP_BY_WINDOW:
            return lambda: self._group_by_window(upstream(), p["window_size"])
        if kind == OperatorKind.FLAT_MAP:
            fn = self.functions.resolve(p["fn"], FLAT_MAP)
            return lambda: self._flat_map(upstream(), fn, op)
        if kind == OperatorKind.TAKE:
            return lambda: self._take(upstream, p["count"])
        if kind == OperatorKind.CACHE:
            return self._cache(upstream)
        raise ValueError(f"operator {kind} cannot appear after the source")

    # --- operators ---
    def _ordered_map(self, items: Iterator[Any], fn: Callable, op: str, parallelism: int) -> Iterator[Any]:
        if parallelism == 1:
            for item in items:
                try:
                    out = fn(item)
                except Exception as e:
                    self._failed(op, item, e)
                    continue
                yield out
            return
        with ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix=op) as pool:
            in_flight: Deque[Tuple[Any, Future]] = deque()
            for item in items:
                in_flight.append((item, pool.submit(fn, item)))
                if len(in_flight) >= 2 * parallelism:
                    yield from self._drain(in_flight, op, 1)
            yield from self._drain(in_flight, op, len(in_flight))

    def _drain(self, in_flight: Deque[Tuple[Any, Future]], op: str, n: int) -> Iterator[Any]:
        for _ in range(n):
            item, future = in_flight.popleft()
            try:
                out = future.result()
            except Exception as e:
                self._failed(op, item, e)
                continue
            yield out

    def _filter(self, items: Iterator[Any], predicate: Callable, op: str) -> Iterator[Any]:
        for item in items:
            try:
                keep = predicate(item)
            except Exception as e:
                self._failed(op, item, e)
                continue
            if keep:
                yield item

    def _fused(self, upstream: Opener, fused: Callable, op: str, parallelism: int) -> Iterator[Any]:
        for out, keep in self._ordered_map(upstream(), fused, op, parallelism):
            if keep:
                yield out

    def _shuffle(self, upstream: Opener, capacity: int, seed: int, index: int) -> Opener:
        opens = counter()

        def open_shuffle() -> Iterator[Any]:
            rng = random.Random(mix_seed(seed, index, next(opens)))
            reservoir: List[Any] = []
            for item in upstream():
                if len(reservoir) < capacity:
                    reservoir.append(item)
                    continue
                slot = rng.randrange(capacity)
                out, reservoir[slot] = reservoir[slot], item
                yield out
            rng.shuffle(reservoir)
            yield from reservoir

        return open_shuffle

    @staticmethod
    def _repeat(upstream: Opener, count: int) -> Iterator[Any]:
        passes = 0
        while count < 0 or passes < count:
            produced = False
            for item in upstream():
                produced = True
                yield item
            passes += 1
            if not produced:
                return

    @staticmethod
    def _batch(items: Iterator[Element], batch_size: int, drop_remainder: bool) -> Iterator[Batch]:
        group: List[Element] = []
        for element in items:
            group.append(element)
            if len(group) == batch_size:
                yield Batch.of(group)
                group = []
        if group and not drop_remainder:
            yield Batch.of(group)

    @staticmethod
    def _pad(item: Any, unit_bytes: int) -> Any:
        if not isinstance(item, Batch):
            return item
        target = item.padded_len * unit_bytes
        padded = tuple(
            e if len(e.payload) >= target else replace(e, payload=e.payload + bytes(target - len(e.payload)))
            for e in item.elements
        )
        return replace(item, elements=padded)

    @staticmethod
    def _prefetch(upstream: Opener, buffer_size: int) -> Iterator[Any]:
        buffer: "queue.Queue[Any]" = queue.Queue(maxsize=buffer_size)
        stop = threading.Event()

        def put(item: Any) -> bool:
            while not stop.is_set():
                try:
                    buffer.put(item, timeout=0.05)
                    return True
                except queue.Full:
                    continue
            return False

        def produce() -> None:
            it = None
            try:
                it = upstream()
                for item in it:
                    if not put(item):
                        return
                put(_DONE)
            except BaseException as e:
                put(_Failure(e))
            finally:
                if it is not None:
                    _close(it)

        thread = threading.Thread(target=produce, name="prefetch", daemon=True)
        thread.start()
        try:
            while True:
                item = buffer.get()
                if item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise item.error
                yield item
        finally:
            stop.set()
            thread.join(timeout=1.0)

    @staticmethod
    def _group_by_window(items: Iterator[Batch], window_size: int) -> Iterator[Window]:
        pending: Dict[Optional[int], List[Batch]] = {}
        for batch in items:
            group = pending.setdefault(batch.bucket_id, [])
            group.append(batch)
            if len(group) == window_size:
                yield Window(batches=tuple(group), bucket_id=batch.bucket_id)
                pending[batch.bucket_id] = []
        for bucket in sorted(pending, key=lambda b: (b is None, b or 0)):
            if pending[bucket]:
                yield Window(batches=tuple(pending[bucket]), bucket_id=bucket)

    def _flat_map(self, items: Iterator[Any], fn: Callable, op: str) -> Iterator[Any]:
        for item in items:
            try:
                outputs = list(fn(item))
            except Exception as e:
                self._failed(op, item, e)
                continue
            yield from outputs

    @staticmethod
    def _take(upstream: Opener, count: int) -> Iterator[Any]:
        if count <= 0:
            return
        it = upstream()
        try:
            for taken, item in enumerate(it, start=1):
                yield item
                if taken >= count:
                    return
        finally:
            _close(it)

    @staticmethod
    def _cache(upstream: Opener) -> Opener:
        cached: List[List[Any]] = []

        def open_cache() -> Iterator[Any]:
            if cached:
                yield from cached[0]
                return
            filled: List[Any] = []
            for item in upstream():
                filled.append(item)
                yield item
            cached.append(filled)

        return open_cache


def instantiate(
    graph: DatasetGraph,
    source: Optional[Iterable[Element]] = None,
    seed: int = 0,
    functions: Optional[FunctionTable] = None,
    fail_fast: bool = False,
) -> ElementStream:
    """
    Binds `graph` to a source of elements and a seed.

    `source` replaces the graph's source node and must be re-iterable if the
    graph re-opens it (repeat). When omitted, range sources are generated and
    records sources read their dataset directory.
    """
    stats = StreamStats()
    executor = _GraphExecutor(functions or default_functions, stats, seed, fail_fast)
    opener = executor.build(graph, source)
    return ElementStream(opener, stats, graph.fingerprint, seed)
