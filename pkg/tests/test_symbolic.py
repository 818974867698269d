import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_ast, random_graph
from kgquery import fuzzy
from kgquery.graph import GraphView, KnowledgeGraph
from kgquery.query import (QUERY_TYPES, TEMPLATES, compile_postfix, instantiate_template,
                           projection_node_ids)
from kgquery.symbolic import (GroundingTooLarge, SymbolicProjector, collect_traversed_edges,
                              ground_enumerate, traverse_project)
from kgquery.vm import execute


@pytest.fixture
def fan():
    return KnowledgeGraph({"0": 0, "1": 1, "2": 2}, {"r": 0}, [(0, 0, 1), (0, 0, 2)])


def test_project_fan(fan):
    out = traverse_project(fuzzy.singleton(0, 3), 0, fan.full_view())
    assert fuzzy.to_boolean(out) == {1, 2}
    assert traverse_project(np.zeros(3), 0, fan.full_view()).tolist() == [0, 0, 0]


def test_project_max_rule():
    g = KnowledgeGraph({"u0": 0, "u1": 1, "v": 2}, {"r": 0}, [(0, 0, 2), (1, 0, 2)])
    out = traverse_project([0.3, 0.7, 0.0], 0, g.full_view())
    assert out[2] == 0.7


def test_ground_fan(fan):
    ast = instantiate_template("1p", [0], [0])
    assert ground_enumerate(ast, fan.full_view()) == {1, 2}
    record = collect_traversed_edges(ast, fan.full_view())
    assert record == {0: frozenset({0, 1})}


def test_2in_negation_covers_all(fan):
    # the negated branch is the positive branch itself
    ast = instantiate_template("2in", [0, 0], [0, 0])
    assert ground_enumerate(ast, fan.full_view()) == set()


def test_empty_input_records_nothing(fan):
    # second hop starts from {1, 2}, which have no outgoing r edges
    ast = instantiate_template("2p", [0], [0, 0])
    record = collect_traversed_edges(ast, fan.full_view())
    assert record[0] == frozenset() and record[1] == frozenset({0, 1})


def test_masking_all_edges(fan):
    ast = instantiate_template("1p", [0], [0])
    view = GraphView(fan, {0, 1})
    assert collect_traversed_edges(ast, view) == {0: frozenset()}


def test_guard():
    big = KnowledgeGraph({str(i): i for i in range(1001)}, {"r": 0}, [(0, 0, 1)])
    with pytest.raises(GroundingTooLarge):
        ground_enumerate(instantiate_template("1p", [0], [0]), big.full_view())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_vm_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(5, 30)), int(rng.integers(1, 4)), rng.uniform(0.05, 0.2))
    view = GraphView(g, np.flatnonzero(rng.random(g.num_edges) < 0.2))
    for _ in range(5):
        ast = random_ast(rng, g.num_entities, g.num_edge_relations)
        out, _ = execute(compile_postfix(ast), SymbolicProjector(), view)
        assert fuzzy.to_boolean(out) == ground_enumerate(ast, view)
        assert set(np.unique(out)) <= {0.0, 1.0}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_usage_record(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 15, 2, 0.15)
    view = GraphView(g, np.flatnonzero(rng.random(g.num_edges) < 0.3))
    name = QUERY_TYPES[rng.integers(len(QUERY_TYPES))]
    t = TEMPLATES[name]
    ast = instantiate_template(t, rng.integers(15, size=t.num_anchors).tolist(),
                               rng.integers(4, size=t.num_relations).tolist())
    record = collect_traversed_edges(ast, view)
    assert sorted(record) == projection_node_ids(ast)
    for edges in record.values():
        assert not edges & view.masked
    assert record == collect_traversed_edges(ast, view)


@given(st.integers(0, 2 ** 32 - 1))
def test_monotone(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 12, 2, 0.2)
    x = rng.random(12)
    y = np.minimum(1.0, x + rng.random(12) * 0.5)
    for r in range(g.num_edge_relations):
        assert np.all(traverse_project(x, r, g.full_view()) <= traverse_project(y, r, g.full_view()))
