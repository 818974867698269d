"""Exact traversal projection and brute-force grounding of queries.

``ground_enumerate`` works on plain Python sets and its own adjacency lists;
it shares no evaluation code with the stack VM so that it can serve as an
oracle for it.
"""

import weakref

import numpy as np

from .errors import KGQueryError
from .query import And, Anchor, Not, Or, Projection, node_count

MAX_GROUND_ENTITIES = 1000

_adjacency_cache = weakref.WeakKeyDictionary()


class GroundingTooLarge(KGQueryError):
    pass


def traverse_project(x, rel, view):
    """Fuzzy relational image: ``out[v] = max(x[u] for unmasked (u, rel, v))``, 0 without edges."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(view.num_entities)
    heads, tails = view.by_relation[rel]
    if len(heads):
        np.maximum.at(out, tails, x[heads])
    return out


class SymbolicProjector:
    """Projector-protocol wrapper around :func:`traverse_project`."""

    def __call__(self, xs, rels, views):
        return [traverse_project(x, r, v) for x, r, v in zip(xs, rels, views)]


def _adjacency(view):
    adj = _adjacency_cache.get(view)
    if adj is None:
        adj = {}
        for eid, (h, r, t) in enumerate(view.base.edges.tolist()):
            if eid not in view.masked:
                adj.setdefault((h, r), []).append((t, eid))
        _adjacency_cache[view] = adj
    return adj


def _check_size(view, limit):
    if view.num_entities > limit:
        raise GroundingTooLarge(
            f"exhaustive grounding refused: {view.num_entities} entities exceed the limit of {limit}")


def _walk(ast, view, on_projection=None):
    adj = _adjacency(view)
    universe = frozenset(range(view.num_entities))

    def go(n, nid):
        if isinstance(n, Anchor):
            return {n.entity}
        if isinstance(n, Projection):
            inputs = go(n.child, nid + 1)
            out, used = set(), set()
            for u in inputs:
                for t, eid in adj.get((u, n.relation), ()):
                    out.add(t)
                    used.add(eid)
            if on_projection is not None:
                on_projection(nid, used)
            return out
        if isinstance(n, Not):
            return set(universe - go(n.child, nid + 1))
        left = go(n.left, nid + 1)
        right = go(n.right, nid + 1 + node_count(n.left))
        return left & right if isinstance(n, And) else left | right

    if not isinstance(ast, (Anchor, Projection, And, Or, Not)):
        raise TypeError(f"not a query node: {ast!r}")
    return go(ast, 0)


def ground_enumerate(ast, view, limit=MAX_GROUND_ENTITIES):
    """Exact answer set of a query on a view, by recursive set semantics."""
    _check_size(view, limit)
    return _walk(ast, view)


def collect_traversed_edges(ast, view, limit=MAX_GROUND_ENTITIES):
    """Projection node id -> frozenset of edge ids leaving that node's exact input set."""
    _check_size(view, limit)
    record = {}

    def keep(nid, used):
        record[nid] = frozenset(used)

    _walk(ast, view, keep)
    return dict(sorted(record.items()))
