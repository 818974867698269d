"""Stack execution of postfix query programs over fuzzy sets.

A projector is any callable ``projector(xs, rels, views) -> list of arrays``
taking a batch of input fuzzy sets, edge relation ids and graph views.  Item
``i`` of the output may depend only on item ``i`` of the inputs.

A per-sample ``view`` is either a :class:`~kgquery.graph.GraphView` or a
mapping from projection node id to view, which lets each projection of a
query see a different edge mask.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

from . import fuzzy
from .errors import ExecutionError
from .query import (And, Anchor, AndOp, Not, NotOp, OrOp, Project, Projection, PushAnchor,
                    node_count)


@dataclass
class ExecutionTrace:
    program: object
    by_instruction: list = field(default_factory=list)
    # instruction index -> (projector round, position in that round's batch)
    projection_slots: dict = field(default_factory=dict)
    peak_depth: int = 0

    @property
    def values(self):
        """AST node id -> fuzzy set produced at that node."""
        return {self.program.source_node_ids[i]: v for i, v in enumerate(self.by_instruction)}

    @property
    def root(self):
        return self.by_instruction[-1]


def _view_for(view, node_id):
    if isinstance(view, Mapping):
        return view[node_id]
    return view


def _num_entities(view):
    if isinstance(view, Mapping):
        return next(iter(view.values())).num_entities
    return view.num_entities


def _apply_local(ins, stack, size):
    if isinstance(ins, PushAnchor):
        stack.append(fuzzy.singleton(ins.entity, size))
    elif isinstance(ins, AndOp):
        y = stack.pop()
        x = stack.pop()
        stack.append(fuzzy.conj(x, y))
    elif isinstance(ins, OrOp):
        y = stack.pop()
        x = stack.pop()
        stack.append(fuzzy.disj(x, y))
    elif isinstance(ins, NotOp):
        stack.append(fuzzy.neg(stack.pop()))
    else:
        raise ExecutionError(f"unknown instruction {ins!r}")


def execute(program, projector, view, capture=False):
    """Run one program; returns ``(answer, trace)`` with ``trace`` None unless captured."""
    size = view.num_entities if not isinstance(view, Mapping) else _num_entities(view)
    stack = []
    trace = ExecutionTrace(program) if capture else None
    n_rounds = 0
    for i, ins in enumerate(program.instructions):
        try:
            if isinstance(ins, Project):
                x = stack.pop()
                node = program.source_node_ids[i]
                (y,) = projector([x], [ins.relation], [_view_for(view, node)])
                stack.append(y)
                if capture:
                    trace.projection_slots[i] = (n_rounds, 0)
                n_rounds += 1
            else:
                _apply_local(ins, stack, size)
        except ExecutionError:
            raise
        except Exception as e:
            raise ExecutionError(str(e), instruction=i) from e
        if len(stack) > program.max_stack_depth:
            raise ExecutionError("stack exceeds the program's declared depth", instruction=i)
        if capture:
            trace.by_instruction.append(stack[-1])
            trace.peak_depth = max(trace.peak_depth, len(stack))
    if len(stack) != 1:
        raise ExecutionError(f"program finished with {len(stack)} values on the stack")
    return stack[0], trace


def execute_batch(programs, projector, views, capture=False):
    """Run a batch of programs, coalescing their projections into shared projector calls.

    Each sample runs its logic instructions on its own.  When a sample reaches
    a projection it waits until every unfinished sample is also waiting at a
    projection; the pending projections then go to the projector as one call.
    Returns the answers, plus the traces when ``capture`` is set.
    """
    programs = list(programs)
    views = list(views)
    if len(programs) != len(views):
        raise ValueError(f"{len(programs)} programs but {len(views)} views")
    n = len(programs)
    stacks = [[] for _ in range(n)]
    pcs = [0] * n
    sizes = [_num_entities(v) for v in views]
    traces = [ExecutionTrace(p) for p in programs] if capture else None
    n_round = 0

    def record(s):
        if capture:
            traces[s].by_instruction.append(stacks[s][-1])
            traces[s].peak_depth = max(traces[s].peak_depth, len(stacks[s]))

    while True:
        pending = []
        for s in range(n):
            prog = programs[s]
            while pcs[s] < len(prog.instructions):
                ins = prog.instructions[pcs[s]]
                if isinstance(ins, Project):
                    pending.append(s)
                    break
                try:
                    _apply_local(ins, stacks[s], sizes[s])
                except Exception as e:
                    raise ExecutionError(str(e), instruction=pcs[s], sample=s) from e
                record(s)
                pcs[s] += 1
        if not pending:
            break
        xs, rels, call_views = [], [], []
        for s in pending:
            prog = programs[s]
            ins = prog.instructions[pcs[s]]
            xs.append(stacks[s].pop())
            rels.append(ins.relation)
            call_views.append(_view_for(views[s], prog.source_node_ids[pcs[s]]))
        try:
            ys = projector(xs, rels, call_views)
        except Exception as e:
            item = getattr(e, "item", None)
            s = pending[item] if item is not None else pending[0]
            raise ExecutionError(str(e), instruction=pcs[s], sample=s) from e
        for slot, (s, y) in enumerate(zip(pending, ys)):
            stacks[s].append(y)
            if capture:
                traces[s].projection_slots[pcs[s]] = (n_round, slot)
            record(s)
            pcs[s] += 1
        n_round += 1

    answers = []
    for s in range(n):
        if len(stacks[s]) != 1:
            raise ExecutionError(f"program finished with {len(stacks[s])} values on the stack", sample=s)
        answers.append(stacks[s][0])
    if capture:
        return answers, traces
    return answers


class CountingProjector:
    """Wraps a projector and counts calls and projected items."""

    def __init__(self, projector):
        self.projector = projector
        self.calls = 0
        self.items = 0

    def __call__(self, xs, rels, views):
        self.calls += 1
        self.items += len(xs)
        return self.projector(xs, rels, views)


def evaluate_recursive(ast, projector, view):
    """Direct recursive evaluation of an AST, used to cross-check compiled programs."""
    size = _num_entities(view)

    def go(n, nid):
        if isinstance(n, Anchor):
            return fuzzy.singleton(n.entity, size)
        if isinstance(n, Projection):
            x = go(n.child, nid + 1)
            return projector([x], [n.relation], [_view_for(view, nid)])[0]
        if isinstance(n, Not):
            return fuzzy.neg(go(n.child, nid + 1))
        x = go(n.left, nid + 1)
        y = go(n.right, nid + 1 + node_count(n.left))
        return fuzzy.conj(x, y) if isinstance(n, And) else fuzzy.disj(x, y)

    return go(ast, 0)
