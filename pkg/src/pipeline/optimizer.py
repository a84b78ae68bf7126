# src/pipeline/optimizer.py
"""
Static graph rewrites applied before a graph is executed.

Passes run in a fixed order:
    1. dead-transformation elimination
    2. map-filter fusion
    3. prefetch injection at the sink
Each pass is total and the composition is idempotent.
"""

import logging
from typing import List

from src.pipeline.functions import CONSTANT_TRUE, IDENTITY_MAP
from src.pipeline.graph import DatasetGraph, OperatorKind, OperatorSpec

logger = logging.getLogger(__name__)

DEFAULT_PREFETCH_BUFFER = 2


def _is_dead(node: OperatorSpec) -> bool:
    if node.kind == OperatorKind.MAP:
        return node.params["fn"] == IDENTITY_MAP
    if node.kind == OperatorKind.FILTER:
        return node.params["predicate"] == CONSTANT_TRUE
    if node.kind == OperatorKind.REPEAT:
        return node.params["count"] == 1
    if node.kind == OperatorKind.SHUFFLE:
        return node.params["buffer_size"] <= 1
    return False


def eliminate_dead_transformations(nodes: List[OperatorSpec]) -> List[OperatorSpec]:
    return [node for node in nodes if not _is_dead(node)]


def fuse_map_filter(nodes: List[OperatorSpec]) -> List[OperatorSpec]:
    """Replaces every map directly followed by a filter with one fused operator."""
    fused: List[OperatorSpec] = []
    i = 0
    while i < len(nodes):
        node = nodes[i]
        following = nodes[i + 1] if i + 1 < len(nodes) else None
        if node.kind == OperatorKind.MAP and following is not None and following.kind == OperatorKind.FILTER:
            params = dict(node.params)
            params["predicate"] = following.params["predicate"]
            fused.append(OperatorSpec(OperatorKind.FUSED_MAP_FILTER, params))
            i += 2
            continue
        fused.append(node)
        i += 1
    return fused


def inject_prefetch(nodes: List[OperatorSpec]) -> List[OperatorSpec]:
    if any(node.kind == OperatorKind.PREFETCH for node in nodes):
        return nodes
    return nodes + [OperatorSpec(OperatorKind.PREFETCH, {"buffer_size": DEFAULT_PREFETCH_BUFFER})]


def optimize(graph: DatasetGraph) -> DatasetGraph:
    """Returns a semantically equivalent, optimized graph."""
    nodes = list(graph.nodes)
    nodes = eliminate_dead_transformations(nodes)
    nodes = fuse_map_filter(nodes)
    nodes = inject_prefetch(nodes)
    optimized = DatasetGraph(nodes=tuple(nodes), version=graph.version)
    if optimized != graph:
        logger.debug(
            f"Optimized graph {graph.fingerprint:016x} -> {optimized.fingerprint:016x}: "
            f"{[k.value for k in optimized.kinds()]}"
        )
    return optimized
