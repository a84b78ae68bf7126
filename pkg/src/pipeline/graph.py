# src/pipeline/graph.py
"""
Dataset graph IR.

A `DatasetGraph` is a linear chain of operators starting at exactly one source
and ending at the sink (the last node). Graphs are built from a pipeline
description, validated against the operator catalog and the function table,
and serialized into a canonical binary form whose FNV-1a hash is the graph
fingerprint:

    version u16 | node count u16 | per node: kind u8 | param count u8 | pairs

Pairs use the layout of `src.core.binary`, sorted by key.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from src.core.binary import decode_pair, encode_pair, fnv1a_64
from src.core.errors import InvalidBoundaries, MalformedSpec
from src.pipeline.functions import FLAT_MAP, MAP, PREDICATE, FunctionTable, default_functions

GRAPH_VERSION = 1

_HEADER = struct.Struct("<HH")
_NODE_HEADER = struct.Struct("<BB")


class OperatorKind(str, Enum):
    SOURCE = "source"
    MAP = "map"
    FILTER = "filter"
    SHUFFLE = "shuffle"
    REPEAT = "repeat"
    BATCH = "batch"
    PAD = "pad"
    PREFETCH = "prefetch"
    BUCKET_BY_SEQUENCE_LENGTH = "bucket_by_sequence_length"
    GROUP_BY_WINDOW = "group_by_window"
    FLAT_MAP = "flat_map"
    TAKE = "take"
    CACHE = "cache"
    FUSED_MAP_FILTER = "fused_map_filter"


# Wire codes; never renumber.
KIND_CODES: Dict[OperatorKind, int] = {kind: code for code, kind in enumerate(OperatorKind, start=1)}
_KINDS_BY_CODE = {code: kind for kind, code in KIND_CODES.items()}

SOURCE_RANGE = "range"
SOURCE_RECORDS = "records"


@dataclass(frozen=True)
class Param:
    type: Any
    required: bool = False
    default: Any = None


def _int_list(value: Any) -> bool:
    return isinstance(value, (list, tuple)) and all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    )


# Parameter schema per operator kind.
CATALOG: Dict[OperatorKind, Dict[str, Param]] = {
    OperatorKind.SOURCE: {
        "type": Param(str, required=True),
        "start": Param(int),
        "end": Param(int),
        "dataset_dir": Param(str),
    },
    OperatorKind.MAP: {
        "fn": Param(str, required=True),
        "parallelism": Param(int, default=1),
        "fn_arg": Param(int),
    },
    OperatorKind.FILTER: {
        "predicate": Param(str, required=True),
    },
    OperatorKind.FUSED_MAP_FILTER: {
        "fn": Param(str, required=True),
        "predicate": Param(str, required=True),
        "parallelism": Param(int, default=1),
        "fn_arg": Param(int),
    },
    OperatorKind.SHUFFLE: {
        "buffer_size": Param(int, required=True),
        "seed": Param(int),
    },
    OperatorKind.REPEAT: {
        "count": Param(int, default=-1),
    },
    OperatorKind.BATCH: {
        "batch_size": Param(int, required=True),
        "drop_remainder": Param(bool, default=False),
    },
    OperatorKind.PAD: {
        "unit_bytes": Param(int, default=1),
    },
    OperatorKind.PREFETCH: {
        "buffer_size": Param(int, default=2),
    },
    OperatorKind.BUCKET_BY_SEQUENCE_LENGTH: {
        "bucket_boundaries": Param(list, required=True),
        "batch_size": Param(int, required=True),
    },
    OperatorKind.GROUP_BY_WINDOW: {
        "window_size": Param(int, required=True),
    },
    OperatorKind.FLAT_MAP: {
        "fn": Param(str, required=True),
    },
    OperatorKind.TAKE: {
        "count": Param(int, required=True),
    },
    OperatorKind.CACHE: {},
}


@dataclass(frozen=True)
class OperatorSpec:
    kind: OperatorKind
    params: Mapping[str, Any] = field(default_factory=dict)

    def get(self, name: str, default: Any = None) -> Any:
        return self.params.get(name, default)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "params": dict(self.params)}


@dataclass(frozen=True)
class DatasetGraph:
    nodes: Tuple[OperatorSpec, ...]
    version: int = GRAPH_VERSION

    @property
    def source(self) -> OperatorSpec:
        return self.nodes[0]

    @property
    def fingerprint(self) -> int:
        return fnv1a_64(self.serialize())

    def kinds(self) -> List[OperatorKind]:
        return [node.kind for node in self.nodes]

    def serialize(self) -> bytes:
        parts = [_HEADER.pack(self.version, len(self.nodes))]
        for node in self.nodes:
            parts.append(_NODE_HEADER.pack(KIND_CODES[node.kind], len(node.params)))
            parts.extend(encode_pair(key, node.params[key]) for key in sorted(node.params))
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes) -> "DatasetGraph":
        try:
            version, count = _HEADER.unpack_from(data, 0)
        except struct.error as e:
            raise MalformedSpec("graph header truncated") from e
        if version != GRAPH_VERSION:
            raise MalformedSpec(f"unsupported graph version {version}")
        offset = _HEADER.size
        nodes: List[OperatorSpec] = []
        for _ in range(count):
            try:
                code, param_count = _NODE_HEADER.unpack_from(data, offset)
            except struct.error as e:
                raise MalformedSpec("node header truncated") from e
            offset += _NODE_HEADER.size
            kind = _KINDS_BY_CODE.get(code)
            if kind is None:
                raise MalformedSpec(f"unknown operator code {code}")
            params: Dict[str, Any] = {}
            for _ in range(param_count):
                key, value, offset = decode_pair(data, offset)
                params[key] = value
            nodes.append(OperatorSpec(kind, params))
        if offset != len(data):
            raise MalformedSpec("trailing bytes after graph")
        return cls(nodes=tuple(nodes), version=version)


def validate_boundaries(boundaries: Sequence[int]) -> List[int]:
    if not _int_list(boundaries) or not boundaries:
        raise InvalidBoundaries(f"bucket boundaries must be a non-empty integer list, got {boundaries!r}")
    if boundaries[0] <= 0:
        raise InvalidBoundaries("bucket boundaries must be > 0")
    if any(lower >= upper for lower, upper in zip(boundaries, boundaries[1:])):
        raise InvalidBoundaries(f"bucket boundaries must be strictly ascending: {boundaries!r}")
    return list(boundaries)


def _normalize_params(kind: OperatorKind, params: Mapping[str, Any]) -> Dict[str, Any]:
    schema = CATALOG[kind]
    unknown = set(params) - set(schema)
    if unknown:
        raise MalformedSpec(f"{kind.value}: unknown params {sorted(unknown)}")
    normalized: Dict[str, Any] = {}
    for name, spec in schema.items():
        value = params.get(name, spec.default)
        if value is None:
            if spec.required:
                raise MalformedSpec(f"{kind.value}: missing required param '{name}'")
            continue
        if spec.type is int and (not isinstance(value, int) or isinstance(value, bool)):
            raise MalformedSpec(f"{kind.value}.{name} must be an integer")
        if spec.type is bool and not isinstance(value, bool):
            raise MalformedSpec(f"{kind.value}.{name} must be a boolean")
        if spec.type is str and not isinstance(value, str):
            raise MalformedSpec(f"{kind.value}.{name} must be a string")
        if spec.type is list:
            if not _int_list(value):
                raise MalformedSpec(f"{kind.value}.{name} must be an integer list")
            value = list(value)
        normalized[name] = value
    return normalized


def _check_node(node: OperatorSpec, functions: FunctionTable) -> None:
    kind, p = node.kind, node.params
    if kind == OperatorKind.SOURCE:
        if p["type"] == SOURCE_RANGE:
            if "start" not in p or "end" not in p or p["start"] > p["end"]:
                raise MalformedSpec("range source needs start <= end")
        elif p["type"] == SOURCE_RECORDS:
            if "dataset_dir" not in p:
                raise MalformedSpec("records source needs dataset_dir")
        else:
            raise MalformedSpec(f"unknown source type '{p['type']}'")
    elif kind in (OperatorKind.MAP, OperatorKind.FUSED_MAP_FILTER):
        functions.lookup(p["fn"], MAP)
        if p["parallelism"] < 1:
            raise MalformedSpec("parallelism must be >= 1")
        if kind == OperatorKind.FUSED_MAP_FILTER:
            functions.lookup(p["predicate"], PREDICATE)
    elif kind == OperatorKind.FILTER:
        functions.lookup(p["predicate"], PREDICATE)
    elif kind == OperatorKind.FLAT_MAP:
        functions.lookup(p["fn"], FLAT_MAP)
    elif kind in (OperatorKind.BATCH, OperatorKind.BUCKET_BY_SEQUENCE_LENGTH):
        if p["batch_size"] < 1:
            raise MalformedSpec("batch_size must be >= 1")
        if kind == OperatorKind.BUCKET_BY_SEQUENCE_LENGTH:
            validate_boundaries(p["bucket_boundaries"])
    elif kind in (OperatorKind.SHUFFLE, OperatorKind.PREFETCH):
        if p["buffer_size"] < 1:
            raise MalformedSpec(f"{kind.value}.buffer_size must be >= 1")
    elif kind == OperatorKind.GROUP_BY_WINDOW:
        if p["window_size"] < 1:
            raise MalformedSpec("window_size must be >= 1")
    elif kind == OperatorKind.TAKE:
        if p["count"] < 0:
            raise MalformedSpec("take.count must be >= 0")
    elif kind == OperatorKind.REPEAT:
        if p["count"] < -1:
            raise MalformedSpec("repeat.count must be >= -1")
    elif kind == OperatorKind.PAD:
        if p["unit_bytes"] < 1:
            raise MalformedSpec("pad.unit_bytes must be >= 1")


NodeDescription = Union[OperatorSpec, Mapping[str, Any]]


def _to_spec(item: NodeDescription) -> OperatorSpec:
    if isinstance(item, OperatorSpec):
        kind, params = item.kind, item.params
    elif isinstance(item, Mapping):
        try:
            kind = OperatorKind(item["kind"])
        except (KeyError, ValueError) as e:
            raise MalformedSpec(f"bad operator kind in {item!r}") from e
        params = item.get("params") or {}
    else:
        raise MalformedSpec(f"cannot interpret pipeline node {item!r}")
    return OperatorSpec(kind, _normalize_params(kind, params))


def build_graph(
    spec: Union["Pipeline", Iterable[NodeDescription]],
    functions: Optional[FunctionTable] = None,
) -> DatasetGraph:
    """
    Validates a pipeline description and returns its canonical graph.

    Raises:
        UnknownFunction: a node references an unregistered function id.
        MalformedSpec: the description violates the catalog or structure.
    """
    functions = functions or default_functions
    if isinstance(spec, Pipeline):
        spec = spec.describe()
    nodes = tuple(_to_spec(item) for item in spec)
    if not nodes:
        raise MalformedSpec("pipeline is empty")
    if nodes[0].kind != OperatorKind.SOURCE:
        raise MalformedSpec("pipeline must start with a source")
    if any(node.kind == OperatorKind.SOURCE for node in nodes[1:]):
        raise MalformedSpec("pipeline must have exactly one source")
    for node in nodes:
        _check_node(node, functions)
    return DatasetGraph(nodes=nodes)


def deserialize_graph(data: bytes, functions: Optional[FunctionTable] = None) -> DatasetGraph:
    """Parses a serialized graph and re-validates it against the local function table."""
    return build_graph(DatasetGraph.deserialize(data).nodes, functions)


class Pipeline:
    """
    Fluent pipeline builder.

        graph = Pipeline.range(0, 6).filter("is_even").batch(2).build()
    """

    def __init__(self, nodes: Sequence[OperatorSpec] = ()):
        self._nodes = tuple(nodes)

    def _then(self, kind: OperatorKind, **params: Any) -> "Pipeline":
        clean = {k: v for k, v in params.items() if v is not None}
        return Pipeline(self._nodes + (OperatorSpec(kind, clean),))

    @classmethod
    def range(cls, start: int, end: int) -> "Pipeline":
        return cls()._then(OperatorKind.SOURCE, type=SOURCE_RANGE, start=start, end=end)

    @classmethod
    def records(cls, dataset_dir: str) -> "Pipeline":
        return cls()._then(OperatorKind.SOURCE, type=SOURCE_RECORDS, dataset_dir=str(dataset_dir))

    def map(self, fn: str, parallelism: int = 1, fn_arg: Optional[int] = None) -> "Pipeline":
        return self._then(OperatorKind.MAP, fn=fn, parallelism=parallelism, fn_arg=fn_arg)

    def filter(self, predicate: str) -> "Pipeline":
        return self._then(OperatorKind.FILTER, predicate=predicate)

    def shuffle(self, buffer_size: int, seed: Optional[int] = None) -> "Pipeline":
        return self._then(OperatorKind.SHUFFLE, buffer_size=buffer_size, seed=seed)

    def repeat(self, count: int = -1) -> "Pipeline":
        return self._then(OperatorKind.REPEAT, count=count)

    def batch(self, batch_size: int, drop_remainder: bool = False) -> "Pipeline":
        return self._then(OperatorKind.BATCH, batch_size=batch_size, drop_remainder=drop_remainder)

    def pad(self, unit_bytes: int = 1) -> "Pipeline":
        return self._then(OperatorKind.PAD, unit_bytes=unit_bytes)

    def prefetch(self, buffer_size: int = 2) -> "Pipeline":
        return self._then(OperatorKind.PREFETCH, buffer_size=buffer_size)

    def bucket_by_sequence_length(self, bucket_boundaries: Sequence[int], batch_size: int) -> "Pipeline":
        return self._then(
            OperatorKind.BUCKET_BY_SEQUENCE_LENGTH,
            bucket_boundaries=list(bucket_boundaries),
            batch_size=batch_size,
        )

    def group_by_window(self, window_size: int) -> "Pipeline":
        return self._then(OperatorKind.GROUP_BY_WINDOW, window_size=window_size)

    def flat_map(self, fn: str) -> "Pipeline":
        return self._then(OperatorKind.FLAT_MAP, fn=fn)

    def take(self, count: int) -> "Pipeline":
        return self._then(OperatorKind.TAKE, count=count)

    def cache(self) -> "Pipeline":
        return self._then(OperatorKind.CACHE)

    def describe(self) -> List[Dict[str, Any]]:
        return [node.describe() for node in self._nodes]

    def build(self, functions: Optional[FunctionTable] = None) -> DatasetGraph:
        return build_graph(self.describe(), functions)
