# src/pipeline/functions.py
"""
Registered function table.

Graphs never carry code. A `map`, `filter` or `flat_map` operator names a
function by string id, and every process that executes the graph resolves the
id against its own table. All registered functions must be deterministic.
"""

import hashlib
import logging
from dataclasses import dataclass
from functools import partial
from typing import Any, Callable, Dict, Iterable, Optional

from src.core.errors import MalformedSpec, UnknownFunction
from src.pipeline.elements import Batch, Element, Window

logger = logging.getLogger(__name__)

MAP = "map"
PREDICATE = "predicate"
FLAT_MAP = "flat_map"

# Ids the optimizer treats as no-ops.
IDENTITY_MAP = "identity"
CONSTANT_TRUE = "always_true"


@dataclass(frozen=True)
class RegisteredFunction:
    function_id: str
    kind: str
    fn: Callable[..., Any]
    takes_arg: bool = False


class FunctionTable:
    """Maps function ids to deterministic callables, per kind."""

    def __init__(self):
        self._entries: Dict[str, RegisteredFunction] = {}

    def register(self, function_id: str, kind: str, takes_arg: bool = False):
        """Decorator registering `fn` under `function_id`."""
        if kind not in (MAP, PREDICATE, FLAT_MAP):
            raise ValueError(f"unknown function kind '{kind}'")

        def decorator(fn: Callable[..., Any]) -> Callable[..., Any]:
            if function_id in self._entries:
                logger.warning(f"Re-registering function id '{function_id}'.")
            self._entries[function_id] = RegisteredFunction(function_id, kind, fn, takes_arg)
            return fn

        return decorator

    def __contains__(self, function_id: str) -> bool:
        return function_id in self._entries

    def lookup(self, function_id: str, kind: str) -> RegisteredFunction:
        entry = self._entries.get(function_id)
        if entry is None:
            raise UnknownFunction(function_id)
        if entry.kind != kind:
            raise MalformedSpec(
                f"function '{function_id}' is a {entry.kind} function, expected {kind}"
            )
        return entry

    def resolve(self, function_id: str, kind: str, arg: Optional[int] = None) -> Callable[[Any], Any]:
        entry = self.lookup(function_id, kind)
        if entry.takes_arg:
            return partial(entry.fn, arg=arg)
        return entry.fn


default_functions = FunctionTable()


@default_functions.register(IDENTITY_MAP, MAP)
def identity(item: Any) -> Any:
    return item


@default_functions.register("reverse_payload", MAP)
def reverse_payload(element: Element) -> Element:
    return Element(payload=element.payload[::-1], seq_len=element.seq_len, key=element.key)


_BURN_BLOCK = 4096


@default_functions.register("burn_cpu", MAP, takes_arg=True)
def burn_cpu(element: Element, arg: Optional[int] = None) -> Element:
    """
    Runs `arg` rounds of SHA-256 over a 4 KiB block seeded by the element key.

    Inputs this large make hashlib release the GIL, so parallel maps and
    worker threads really consume separate cores.
    """
    digest = element.key.to_bytes(8, "little", signed=False) * 4
    for _ in range(arg or 0):
        digest = hashlib.sha256(digest * (_BURN_BLOCK // len(digest))).digest()
    return element


@default_functions.register(CONSTANT_TRUE, PREDICATE)
def always_true(item: Any) -> bool:
    return True


@default_functions.register("is_even", PREDICATE)
def is_even(element: Element) -> bool:
    return element.key % 2 == 0


@default_functions.register("is_odd", PREDICATE)
def is_odd(element: Element) -> bool:
    return element.key % 2 == 1


@default_functions.register("non_empty", PREDICATE)
def non_empty(element: Element) -> bool:
    return element.seq_len > 0


@default_functions.register("flatten", FLAT_MAP)
def flatten(item: Any) -> Iterable[Any]:
    """Window → its batches; batch → its elements."""
    if isinstance(item, Window):
        return item.batches
    if isinstance(item, Batch):
        return item.elements
    return (item,)
