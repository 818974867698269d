import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_ast, random_graph
from kgquery.errors import ExecutionError
from kgquery.gnn import GnnConfig, NeuralProjector, init_params
from kgquery.graph import KnowledgeGraph, load_triples
from kgquery.query import (QUERY_TYPES, TEMPLATES, Anchor, NotOp, PostfixProgram, PushAnchor,
                           compile_postfix, instantiate_template, parse_query)
from kgquery.symbolic import SymbolicProjector
from kgquery.vm import CountingProjector, evaluate_recursive, execute, execute_batch


def test_push_not():
    g = KnowledgeGraph({"a": 0, "b": 1, "c": 2}, {"r": 0}, [(0, 0, 1)])
    prog = PostfixProgram((PushAnchor(2), NotOp()), 1, (1, 0))
    out, trace = execute(prog, SymbolicProjector(), g.full_view(), capture=True)
    assert out.tolist() == [1.0, 1.0, 0.0]
    assert len(trace.by_instruction) == 2 and trace.root is out


def test_turing_query_by_hand():
    text = ("a\tWin\tTuringAward\nb\tWin\tTuringAward\nc\tWin\tNobel\n"
            "a\tField\tDeepLearning\nc\tField\tDeepLearning\n"
            "a\tUniversity\tu1\nb\tUniversity\tu2\nc\tUniversity\tu3\n")
    g = load_triples(text)
    q = "(P University fwd (AND (P Win inv (E TuringAward)) (P Field inv (E DeepLearning))))"
    ast = parse_query(q, g)
    out, trace = execute(compile_postfix(ast), SymbolicProjector(), g.full_view(), capture=True)
    # only a won the award and works on deep learning
    assert {g.entity_names[i] for i in np.flatnonzero(out > 0.5)} == {"u1"}
    assert set(trace.values) == set(range(6))
    assert {g.entity_names[i] for i in np.flatnonzero(trace.values[2] > 0.5)} == {"a", "b"}


def _graph_and_params(seed=0):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 10, 2, 0.15)
    params = init_params(GnnConfig(num_layers=2, hidden_dim=4, mlp_hidden=8), 2, seed)
    return rng, g, params


def test_two_query_barrier_rounds():
    rng, g, params = _graph_and_params()
    progs = [compile_postfix(instantiate_template("2i", [0, 1], [0, 1])),
             compile_postfix(instantiate_template("1p", [2], [2]))]
    calls = []

    class Spy(SymbolicProjector):
        def __call__(self, xs, rels, views):
            calls.append(list(rels))
            return super().__call__(xs, rels, views)

    execute_batch(progs, Spy(), [g.full_view()] * 2)
    # 2i's first branch shares round 1 with 1p; its second branch runs alone
    assert calls == [[0, 2], [1]]


def test_batch_of_one_is_execute():
    rng, g, params = _graph_and_params()
    prog = compile_postfix(instantiate_template("pin", [0, 1], [0, 3, 1]))
    for proj in (SymbolicProjector(), NeuralProjector(params)):
        (a,) = execute_batch([prog], proj, [g.full_view()])
        b, _ = execute(prog, proj, g.full_view())
        assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_batch_equals_sequential(seed):
    rng, g, params = _graph_and_params(seed % 7)
    rng = np.random.default_rng(seed)
    programs, views = [], []
    for _ in range(int(rng.integers(1, 12))):
        t = TEMPLATES[QUERY_TYPES[rng.integers(len(QUERY_TYPES))]]
        ast = instantiate_template(t, rng.integers(g.num_entities, size=t.num_anchors).tolist(),
                                   rng.integers(g.num_edge_relations, size=t.num_relations).tolist())
        programs.append(compile_postfix(ast))
        views.append(g.full_view().with_mask(np.flatnonzero(rng.random(g.num_edges) < 0.2)))
    for proj in (SymbolicProjector(), NeuralProjector(params)):
        counting = CountingProjector(proj)
        batch, traces = execute_batch(programs, counting, views, capture=True)
        for p, v, y, tr in zip(programs, views, batch, traces):
            y1, tr1 = execute(p, proj, v, capture=True)
            assert np.array_equal(y, y1)
            assert all(np.array_equal(a, b) for a, b in zip(tr.by_instruction, tr1.by_instruction))
            assert tr.peak_depth <= p.max_stack_depth
        assert counting.calls == max(p.num_projections() for p in programs)
        assert counting.items == sum(p.num_projections() for p in programs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_call_count_is_max_projections(seed):
    rng, g, _ = _graph_and_params(1)
    rng = np.random.default_rng(seed)
    programs = [compile_postfix(random_ast(rng, g.num_entities, g.num_edge_relations, 5))
                for _ in range(int(rng.integers(1, 6)))]
    counting = CountingProjector(SymbolicProjector())
    execute_batch(programs, counting, [g.full_view()] * len(programs))
    assert counting.calls == max(p.num_projections() for p in programs)


def test_execute_matches_recursive_random():
    rng, g, params = _graph_and_params(3)
    for proj in (SymbolicProjector(), NeuralProjector(params)):
        for _ in range(60):
            ast = random_ast(rng, g.num_entities, g.num_edge_relations)
            a, _ = execute(compile_postfix(ast), proj, g.full_view())
            assert np.array_equal(a, evaluate_recursive(ast, proj, g.full_view()))


def test_errors_carry_instruction_and_sample():
    rng, g, _ = _graph_and_params()
    bad = compile_postfix(Anchor(g.num_entities + 3))
    with pytest.raises(ExecutionError) as info:
        execute(bad, SymbolicProjector(), g.full_view())
    assert info.value.instruction == 0

    def broken(xs, rels, views):
        raise RuntimeError("projector exploded")

    good = compile_postfix(instantiate_template("1p", [0], [0]))
    with pytest.raises(ExecutionError, match="exploded") as info:
        execute_batch([good, good], broken, [g.full_view()] * 2)
    assert info.value.instruction == 1 and info.value.sample == 0
    with pytest.raises(ExecutionError) as info:
        execute_batch([good, bad], SymbolicProjector(), [g.full_view()] * 2)
    assert info.value.sample == 1


def test_per_node_views():
    g = KnowledgeGraph({"a": 0, "b": 1, "c": 2}, {"r": 0}, [(0, 0, 1), (1, 0, 2)])
    ast = instantiate_template("2p", [0], [0, 0])
    prog = compile_postfix(ast)
    full = g.full_view()
    # hide the second hop's edge only at the outer projection (node 0)
    views = {0: full.with_mask({1}), 1: full}
    out, _ = execute(prog, SymbolicProjector(), views)
    assert out.tolist() == [0, 0, 0]
    out, _ = execute(prog, SymbolicProjector(), {0: full, 1: full.with_mask({1})})
    assert out.tolist() == [0, 0, 1]
