"""Message-passing relation projector with an explicit reverse pass.

For a fuzzy input set ``x`` and projection relation ``q`` every entity starts
from ``h0[v] = x[v] * emb[q]``.  Each layer ``t`` sends, along every unmasked
edge ``(z, r, v)``, the message ``h[z] * (W[t, r] @ emb[q] + b[t, r])``.  A
node aggregates its incoming messages together with its own ``h0[v]`` by
mean, max, min and standard deviation, mixes the four with a linear map and
applies ReLU.  An MLP with a sigmoid output turns the last layer into
membership probabilities.

Everything runs in float64 numpy.  ``gnn_forward(..., capture=True)``
returns one :class:`ActivationTape` per item, and :func:`gnn_backward`
replays it in reverse to produce exact gradients.
"""

from __future__ import annotations

import struct
import weakref
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import CheckpointError, NumericError

STD_EPS = 1e-10
MAGIC = b"GQE1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GnnConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    mlp_layers: int = 2
    mlp_hidden: int = 64

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "mlp_layers", "mlp_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


def param_shapes(config, num_relations):
    """Ordered mapping parameter name -> shape."""
    d, T, r2 = config.hidden_dim, config.num_layers, 2 * num_relations
    shapes = {
        "query": (r2, d),
        "msg_weight": (T, r2, d, d),
        "msg_bias": (T, r2, d),
        "pna_weight": (T, 4 * d, d),
        "pna_bias": (T, d),
    }
    dims = [d] + [config.mlp_hidden] * (config.mlp_layers - 1) + [1]
    for i in range(config.mlp_layers):
        shapes[f"mlp_w{i}"] = (dims[i], dims[i + 1])
        shapes[f"mlp_b{i}"] = (dims[i + 1],)
    return shapes


class GnnParameters:
    """Named float64 arrays plus the config and relation count they were built for."""

    def __init__(self, arrays, config, num_relations):
        self.config = config
        self.num_relations = num_relations
        shapes = param_shapes(config, num_relations)
        if list(arrays) != list(shapes):
            raise ValueError(f"parameter names {list(arrays)} do not match {list(shapes)}")
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape}, expected {shape}")
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def num_parameters(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return GnnParameters({k: v.copy() for k, v in self.arrays.items()}, self.config, self.num_relations)

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def equal(self, other):
        return (self.config == other.config and self.num_relations == other.num_relations
                and all(np.array_equal(self[k], other[k]) for k in self))


def init_params(config, num_relations, seed=0):
    """Weights uniform in ``[-1/sqrt(d), 1/sqrt(d)]``, biases zero."""
    if num_relations < 1:
        raise ValueError("num_relations must be positive")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(config.hidden_dim)
    arrays = {}
    for name, shape in param_shapes(config, num_relations).items():
        if name == "query" or name.endswith("weight") or name.startswith("mlp_w"):
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return GnnParameters(arrays, config, num_relations)


# ---------------------------------------------------------------------------
# per-view message-passing layout

@dataclass
class _Layout:
    num_entities: int
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    starts: np.ndarray  # position of each node's own message in the augmented list
    edge_pos: np.ndarray  # position of each edge message in the augmented list
    seg: np.ndarray  # augmented position -> node
    counts: np.ndarray  # messages per node, self included
    to_src: sparse.csr_matrix  # (V, E) sums edge rows into their source node
    to_rel: sparse.csr_matrix  # (2R, E) sums edge rows into their relation


_layouts = weakref.WeakKeyDictionary()


def _layout(view):
    lay = _layouts.get(view)
    if lay is not None:
        return lay
    _, src, rel, dst = view.by_tail
    V, E = view.num_entities, len(src)
    indeg = np.bincount(dst, minlength=V)
    ptr = np.concatenate([[0], np.cumsum(indeg)])
    ones, cols = np.ones(E), np.arange(E)
    lay = _Layout(
        num_entities=V,
        src=src, rel=rel, dst=dst,
        starts=ptr[:-1] + np.arange(V),
        edge_pos=cols + dst + 1,
        seg=np.repeat(np.arange(V), indeg + 1),
        counts=(indeg + 1).astype(np.float64),
        to_src=sparse.csr_matrix((ones, (src, cols)), shape=(V, E)),
        to_rel=sparse.csr_matrix((ones, (rel, cols)), shape=(view.num_edge_relations, E)),
    )
    _layouts[view] = lay
    return lay


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class ActivationTape:
    params: GnnParameters
    x: np.ndarray
    relation: int
    layout: _Layout
    hs: list  # h0 .. hT
    rel_vectors: list  # per layer (2R, d)
    augmented: list
    means: list
    maxes: list
    mins: list
    devs: list
    stds: list
    feats: list
    pre_relu: list
    mlp_inputs: list
    mlp_pre: list
    output: np.ndarray
    edge_touches: int = 0


def _forward_one(x, rel, view, params, capture, counter):
    cfg = params.config
    lay = _layout(view)
    q = params["query"][rel]
    h0 = x[:, None] * q[None, :]
    h = h0
    tape = ActivationTape(params, x, rel, lay, [h0], [], [], [], [], [], [], [], [], [], [], [], None) \
        if capture else None
    touches = 0
    for t in range(cfg.num_layers):
        w = params["msg_weight"][t] @ q + params["msg_bias"][t]
        msg = h[lay.src] * w[lay.rel]
        touches += len(lay.src)
        aug = np.empty((len(lay.seg), cfg.hidden_dim))
        aug[lay.starts] = h0
        aug[lay.edge_pos] = msg
        mean = np.add.reduceat(aug, lay.starts, axis=0) / lay.counts[:, None]
        mx = np.maximum.reduceat(aug, lay.starts, axis=0)
        mn = np.minimum.reduceat(aug, lay.starts, axis=0)
        dev = aug - mean[lay.seg]
        var = np.add.reduceat(dev * dev, lay.starts, axis=0) / lay.counts[:, None]
        std = np.sqrt(var + STD_EPS)
        feat = np.concatenate([mean, mx, mn, std], axis=1)
        z = feat @ params["pna_weight"][t] + params["pna_bias"][t]
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activations in message-passing layer {t + 1}")
        h = np.maximum(z, 0.0)
        if capture:
            tape.rel_vectors.append(w)
            tape.augmented.append(aug)
            tape.means.append(mean)
            tape.maxes.append(mx)
            tape.mins.append(mn)
            tape.devs.append(dev)
            tape.stds.append(std)
            tape.feats.append(feat)
            tape.pre_relu.append(z)
            tape.hs.append(h)
    a = h
    for i in range(cfg.mlp_layers):
        z = a @ params[f"mlp_w{i}"] + params[f"mlp_b{i}"]
        if capture:
            tape.mlp_inputs.append(a)
            tape.mlp_pre.append(z)
        a = np.maximum(z, 0.0) if i < cfg.mlp_layers - 1 else z
    logits = a[:, 0]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activations in the output MLP")
    y = expit(logits)
    if counter is not None:
        counter["edge_touches"] += touches
        counter["items"] += 1
    if capture:
        tape.output = y
        tape.edge_touches = touches
    return y, tape


def gnn_forward(xs, rels, views, params, capture=False, counter=None):
    """Project a batch of fuzzy sets.

    Returns ``(outputs, tapes)``; ``tapes`` is None unless ``capture``.
    ``counter`` (e.g. a ``collections.Counter``) receives ``edge_touches``,
    the number of edge messages computed.
    """
    if not (len(xs) == len(rels) == len(views)):
        raise ValueError("xs, rels and views must have the same length")
    outs, tapes = [], []
    for x, rel, view in zip(xs, rels, views):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (view.num_entities,):
            raise ValueError(f"input has shape {x.shape}, expected ({view.num_entities},)")
        if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
            raise ValueError("input memberships must lie in [0, 1]")
        if not 0 <= rel < 2 * params.num_relations:
            raise ValueError(f"relation id {rel} out of range")
        y, tape = _forward_one(x, int(rel), view, params, capture, counter)
        outs.append(y)
        tapes.append(tape)
    return outs, (tapes if capture else None)


def _first_position(aug, target, lay):
    """Per node and column, the first augmented position holding ``target``."""
    n = len(lay.seg)
    hit = aug == target[lay.seg]
    pos = np.where(hit, np.arange(n)[:, None], n)
    return np.minimum.reduceat(pos, lay.starts, axis=0)


def gnn_backward(tape, grad_out, need_input_grad=True):
    """Gradients of ``sum(grad_out * output)`` for one recorded forward pass.

    Returns ``(param_grads, grad_x)`` where ``param_grads`` maps parameter
    names to arrays shaped like the parameters.
    """
    params, cfg, lay = tape.params, tape.params.config, tape.layout
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != tape.output.shape:
        raise ValueError(f"grad_out has shape {grad_out.shape}, expected {tape.output.shape}")
    if not np.all(np.isfinite(grad_out)):
        raise NumericError("non-finite output gradient")
    grads = params.zeros_like()
    y = tape.output

    g = (grad_out * y * (1.0 - y))[:, None]
    for i in reversed(range(cfg.mlp_layers)):
        if i < cfg.mlp_layers - 1:
            g = g * (tape.mlp_pre[i] > 0)
        grads[f"mlp_w{i}"] = tape.mlp_inputs[i].T @ g
        grads[f"mlp_b{i}"] = g.sum(axis=0)
        g = g @ params[f"mlp_w{i}"].T

    d = cfg.hidden_dim
    q = params["query"][tape.relation]
    cols = np.arange(d)
    gh = g
    gh0 = np.zeros_like(tape.hs[0])
    gq = np.zeros(d)
    for t in reversed(range(cfg.num_layers)):
        gz = gh * (tape.pre_relu[t] > 0)
        grads["pna_weight"][t] = tape.feats[t].T @ gz
        grads["pna_bias"][t] = gz.sum(axis=0)
        gfeat = gz @ params["pna_weight"][t].T
        gmean, gmax, gmin, gstd = (gfeat[:, k * d:(k + 1) * d] for k in range(4))

        counts = lay.counts[:, None]
        gaug = (gmean / counts)[lay.seg]
        gaug += (gstd / (tape.stds[t] * counts))[lay.seg] * tape.devs[t]
        aug = tape.augmented[t]
        gaug[_first_position(aug, tape.maxes[t], lay), cols] += gmax
        gaug[_first_position(aug, tape.mins[t], lay), cols] += gmin

        gh0 += gaug[lay.starts]
        gmsg = gaug[lay.edge_pos]
        w = tape.rel_vectors[t]
        h_prev = tape.hs[t]
        gh = lay.to_src @ (gmsg * w[lay.rel])
        gw = lay.to_rel @ (gmsg * h_prev[lay.src])
        grads["msg_weight"][t] = gw[:, :, None] * q[None, None, :]
        grads["msg_bias"][t] = gw
        gq += np.einsum("ri,rij->j", gw, params["msg_weight"][t])
    gh0 += gh
    gq += tape.x @ gh0
    grads["query"][tape.relation] = gq
    grad_x = gh0 @ q if need_input_grad else None
    return grads, grad_x


def add_grads(total, grads):
    for k, v in grads.items():
        total[k] += v
    return total


class NeuralProjector:
    """Projector-protocol wrapper around :func:`gnn_forward`.

    With ``record=True`` every call appends its list of tapes to ``rounds``.
    """

    def __init__(self, params, record=False, counter=None):
        self.params = params
        self.record = record
        self.counter = counter
        self.rounds = []

    def __call__(self, xs, rels, views):
        outs, tapes = gnn_forward(xs, rels, views, self.params, capture=self.record, counter=self.counter)
        if self.record:
            self.rounds.append(tapes)
        return outs


# ---------------------------------------------------------------------------
# checkpoints

_HEADER = struct.Struct("<4sI5I")


def save_checkpoint(params, path):
    cfg = params.config
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, cfg.num_layers, cfg.hidden_dim,
                             cfg.mlp_layers, cfg.mlp_hidden, params.num_relations))
        for name in param_shapes(cfg, params.num_relations):
            f.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`; returns ``(params, config)``."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    _, version, T, d, mlp_layers, mlp_hidden, num_relations = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    try:
        config = GnnConfig(T, d, mlp_layers, mlp_hidden)
    except ValueError as e:
        raise CheckpointError(f"{path}: invalid config block: {e}") from None
    shapes = param_shapes(config, num_relations)
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) < expected:
        raise CheckpointError(f"{path}: truncated ({len(data)} bytes, expected {expected})")
    if len(data) > expected:
        raise CheckpointError(f"{path}: {len(data) - expected} unexpected trailing bytes")
    arrays, offset = {}, _HEADER.size
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    return GnnParameters(arrays, config, num_relations), config
