import numpy as np

from kgquery.graph import KnowledgeGraph
from kgquery.query import And, Anchor, Not, Or, Projection


def random_graph(rng, num_entities=20, num_relations=3, density=0.1):
    """Each possible (h, r, t) is present with probability ``density``."""
    mask = rng.random((num_entities, num_relations, num_entities)) < density
    trip = np.argwhere(mask)
    if len(trip) == 0:
        trip = np.array([[0, 0, min(1, num_entities - 1)]])
    ents = {f"v{i}": i for i in range(num_entities)}
    rels = {f"r{i}": i for i in range(num_relations)}
    return KnowledgeGraph(ents, rels, trip)


def random_ast(rng, num_entities, num_edge_relations, max_depth=6, root=True):
    """Random tree; Not never at the root, leaves are anchors."""
    if max_depth <= 1:
        return Anchor(int(rng.integers(num_entities)))
    kinds = ["anchor", "proj", "proj", "and", "or"] + ([] if root else ["not"])
    kind = kinds[rng.integers(len(kinds))]
    sub = lambda: random_ast(rng, num_entities, num_edge_relations, max_depth - 1, root=False)  # noqa: E731
    if kind == "anchor":
        return Anchor(int(rng.integers(num_entities)))
    if kind == "proj":
        return Projection(int(rng.integers(num_edge_relations)), sub())
    if kind == "not":
        return Not(sub())
    if kind == "and":
        return And(sub(), sub())
    return Or(sub(), sub())


def random_mask(rng, graph, frac=0.2):
    return frozenset(np.flatnonzero(rng.random(graph.num_edges) < frac).tolist())


def central_diff(f, arr, idx, h=1e-5):
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


def perturbed_params(config, num_relations, seed, scale=0.3):
    """Initial parameters plus a uniform offset, so no ReLU input sits exactly at zero."""
    from kgquery.gnn import init_params

    params = init_params(config, num_relations, seed)
    rng = np.random.default_rng([seed, 99])
    for k in params:
        params.arrays[k] = params[k] + rng.uniform(-scale, scale, params[k].shape)
    return params


def gradient_check(params, x, rel, view, answers, h=1e-5):
    """Max relative error of analytic vs central-difference gradients, per parameter group and input."""
    from kgquery.gnn import gnn_backward, gnn_forward
    from kgquery.train import bce_loss

    x = np.array(x, dtype=np.float64)

    def loss():
        (y,), _ = gnn_forward([x], [rel], [view], params)
        return bce_loss(y, answers)[0]

    (y,), (tape,) = gnn_forward([x], [rel], [view], params, capture=True)
    _, g_out = bce_loss(y, answers)
    grads, gx = gnn_backward(tape, g_out)
    worst = {}
    for k in params:
        arr = params.arrays[k]
        errs = [rel_err(grads[k][idx], central_diff(loss, arr, idx, h)) for idx in np.ndindex(arr.shape)]
        worst[k] = max(errs)
    worst["input"] = max(rel_err(gx[i], central_diff(loss, x, i, h)) for i in range(len(x)))
    return worst
