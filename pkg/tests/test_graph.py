# tests/test_graph.py
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import InvalidBoundaries, MalformedSpec, UnknownFunction
from src.pipeline.engine import instantiate
from src.pipeline.functions import MAP, FunctionTable
from src.pipeline.graph import DatasetGraph, OperatorKind, Pipeline, build_graph, deserialize_graph
from src.pipeline.optimizer import optimize


def test_fingerprint_is_stable_across_builds():
    a = Pipeline.range(0, 10).map("reverse_payload").batch(3).build()
    b = Pipeline.range(0, 10).map("reverse_payload").batch(3).build()
    assert a.fingerprint == b.fingerprint
    assert a.serialize() == b.serialize()


def test_fingerprint_changes_with_params():
    a = Pipeline.range(0, 10).batch(3).build()
    b = Pipeline.range(0, 10).batch(4).build()
    assert a.fingerprint != b.fingerprint


def test_serialized_graph_parses_back():
    graph = Pipeline.range(0, 8).shuffle(4, seed=1).bucket_by_sequence_length([2, 4], 2).build()
    assert deserialize_graph(graph.serialize()) == graph


def test_dict_description_matches_builder():
    description = [
        {"kind": "source", "params": {"type": "range", "start": 0, "end": 4}},
        {"kind": "batch", "params": {"batch_size": 2}},
    ]
    assert build_graph(description) == Pipeline.range(0, 4).batch(2).build()


def test_unknown_function_is_rejected():
    with pytest.raises(UnknownFunction):
        Pipeline.range(0, 4).map("no_such_fn").build()


def test_function_kind_must_match():
    with pytest.raises(MalformedSpec):
        Pipeline.range(0, 4).filter("reverse_payload").build()


@pytest.mark.parametrize("description", [
    [],
    [{"kind": "batch", "params": {"batch_size": 2}}],
    [{"kind": "source", "params": {"type": "range", "start": 5, "end": 1}}],
    [{"kind": "source", "params": {"type": "records"}}],
    [{"kind": "source", "params": {"type": "range", "start": 0, "end": 1}},
     {"kind": "source", "params": {"type": "range", "start": 0, "end": 1}}],
    [{"kind": "source", "params": {"type": "range", "start": 0, "end": 1}},
     {"kind": "batch", "params": {"batch_size": 0}}],
    [{"kind": "source", "params": {"type": "range", "start": 0, "end": 1}},
     {"kind": "batch", "params": {"batch_size": 2, "colour": "red"}}],
    [{"kind": "teleport", "params": {}}],
])
def test_malformed_descriptions(description):
    with pytest.raises(MalformedSpec):
        build_graph(description)


@pytest.mark.parametrize("boundaries", [[], [0, 4], [4, 4], [8, 2]])
def test_bad_bucket_boundaries(boundaries):
    with pytest.raises(InvalidBoundaries):
        Pipeline.range(0, 4).bucket_by_sequence_length(boundaries, 2).build()


def test_truncated_serialization_is_rejected():
    data = Pipeline.range(0, 4).batch(2).build().serialize()
    for cut in range(len(data)):
        with pytest.raises(MalformedSpec):
            DatasetGraph.deserialize(data[:cut])


def test_custom_function_table():
    table = FunctionTable()

    @table.register("times_two", MAP)
    def times_two(element):
        return element

    Pipeline.range(0, 2).map("times_two").build(table)
    with pytest.raises(UnknownFunction):
        Pipeline.range(0, 2).map("times_two").build()


# --- optimizer ---
def test_optimizer_removes_dead_nodes_and_fuses():
    graph = (
        Pipeline.range(0, 10)
        .map("identity")
        .repeat(1)
        .shuffle(1)
        .map("reverse_payload")
        .filter("is_even")
        .batch(2)
        .build()
    )
    assert optimize(graph).kinds() == [
        OperatorKind.SOURCE,
        OperatorKind.FUSED_MAP_FILTER,
        OperatorKind.BATCH,
        OperatorKind.PREFETCH,
    ]


def test_optimizer_keeps_existing_prefetch():
    graph = Pipeline.range(0, 4).prefetch(5).batch(2).build()
    assert optimize(graph).kinds().count(OperatorKind.PREFETCH) == 1


def test_optimizer_is_idempotent():
    graph = Pipeline.range(0, 10).map("reverse_payload").filter("is_odd").batch(3).build()
    once = optimize(graph)
    assert optimize(once) == once


ops = st.sampled_from([
    lambda p: p.map("identity"),
    lambda p: p.map("reverse_payload"),
    lambda p: p.filter("is_even"),
    lambda p: p.filter("always_true"),
    lambda p: p.map("reverse_payload", parallelism=3),
    lambda p: p.repeat(1),
    lambda p: p.repeat(2),
    lambda p: p.shuffle(1),
    lambda p: p.take(7),
])


@settings(max_examples=40, deadline=None)
@given(st.lists(ops, max_size=6), st.integers(1, 4))
def test_optimized_graph_produces_the_same_output(chain, batch_size):
    pipeline = Pipeline.range(0, 20)
    for op in chain:
        pipeline = op(pipeline)
    graph = pipeline.batch(batch_size).build()
    plain = [b.keys for b in instantiate(graph)]
    optimized = [b.keys for b in instantiate(optimize(graph))]
    assert optimized == plain
