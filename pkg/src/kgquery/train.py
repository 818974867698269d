"""Training of the neural projector on query datasets."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import logit, softmax

from .bench import evaluate
from .errors import NumericError
from .gnn import NeuralProjector, add_grads, gnn_backward, save_checkpoint
from .graph import GraphView
from .query import AndOp, NotOp, OrOp, Project, PushAnchor
from .vm import execute_batch

logger = logging.getLogger(__name__)

PROB_EPS = 1e-9
WEIGHTINGS = ("uniform-per-query", "uniform-per-answer")


@dataclass
class TrainConfig:
    dropout_p: float = 0.25
    learning_rate: float = 5e-3
    batch_size: int = 192
    iterations: int = 10000
    adversarial_temperature: float | None = None
    sample_weighting: str = "uniform-per-query"
    pair_inverses: bool = True
    gradient_gating: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if self.sample_weighting not in WEIGHTINGS:
            raise ValueError(f"sample_weighting must be one of {WEIGHTINGS}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.adversarial_temperature is not None and self.adversarial_temperature <= 0:
            raise ValueError("adversarial_temperature must be positive")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown training config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(params.zeros_like(), params.zeros_like())


def adaptive_moment_update(params, grads, state, lr):
    """One bias-corrected Adam step; returns new ``(params, state)`` without touching the inputs."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new = params.copy()
    m, v = {}, {}
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** step)
        v_hat = v[k] / (1 - b2 ** step)
        new.arrays[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, OptimizerState(m, v, step, b1, b2, state.eps)


def bce_loss(pred, answers, adversarial_temperature=None):
    """Binary cross entropy over all entities, positives and negatives averaged separately.

    With ``adversarial_temperature`` the negative terms are reweighted by
    ``softmax(logit(pred) / temperature)`` over the negatives; the weights are
    treated as constants in the gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    answers = sorted(answers)
    if not answers:
        raise ValueError("answer set is empty")
    if len(answers) >= len(pred):
        raise ValueError("every entity is an answer; there are no negatives")
    pos = np.zeros(len(pred), dtype=bool)
    pos[answers] = True
    p = np.clip(pred, PROB_EPS, 1 - PROB_EPS)
    inside = (pred > PROB_EPS) & (pred < 1 - PROB_EPS)

    n_pos = pos.sum()
    neg_weight = np.zeros(len(pred))
    if adversarial_temperature is None:
        neg_weight[~pos] = 1.0 / (len(pred) - n_pos)
    else:
        neg_weight[~pos] = softmax(logit(p[~pos]) / adversarial_temperature)
    loss = -np.log(p[pos]).sum() / n_pos - (neg_weight[~pos] * np.log1p(-p[~pos])).sum()
    grad = np.where(pos, -1.0 / (n_pos * p), neg_weight / (1.0 - p)) * inside
    return float(loss), grad


def make_dropout_plan(record, p, graph=None, pair_inverses=True, seed=0):
    """Projection node id -> frozenset of edge ids to hide, each traversed edge with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if pair_inverses and graph is None:
        raise ValueError("pairing inverse edges needs the graph")
    rng = np.random.default_rng(seed)
    plan = {}
    for nid in sorted(record):
        edges = np.array(sorted(record[nid]), dtype=np.int64)
        dropped = edges[rng.random(len(edges)) < p]
        masked = set(dropped.tolist())
        if pair_inverses:
            masked.update(graph.inverse_edge(e) for e in dropped.tolist())
        plan[nid] = frozenset(masked)
    return plan


def backprop_program(program, trace, grad_root, project_backward, gate=True):
    """Push an answer-set gradient back through a program's logic instructions.

    ``project_backward(instruction_index, grad)`` handles each projection and
    returns the gradient w.r.t. its input set.  With ``gate`` the inputs of
    projections are constants, so nothing flows past a projection.
    """
    operands = program.operands()
    values = trace.by_instruction
    grads = [None] * len(program.instructions)
    grads[-1] = grad_root

    def push(i, g):
        grads[i] = g if grads[i] is None else grads[i] + g

    for i in reversed(range(len(program.instructions))):
        g = grads[i]
        if g is None:
            continue
        ins = program.instructions[i]
        if isinstance(ins, PushAnchor):
            continue
        if isinstance(ins, Project):
            gx = project_backward(i, g)
            if not gate and gx is not None:
                push(operands[i][0], gx)
        elif isinstance(ins, NotOp):
            push(operands[i][0], -g)
        else:
            a, b = operands[i]
            x, y = values[a], values[b]
            if isinstance(ins, AndOp):
                push(a, g * y)
                push(b, g * x)
            elif isinstance(ins, OrOp):
                push(a, g * (1.0 - y))
                push(b, g * (1.0 - x))
    return grads


def sample_weights(samples, weighting):
    if weighting == "uniform-per-query":
        return np.full(len(samples), 1.0 / len(samples))
    sizes = np.array([len(s.answers) for s in samples], dtype=np.float64)
    return sizes / sizes.sum()


def _dropout_views(samples, graph, config, step, base_view):
    views = []
    for i, s in enumerate(samples):
        if s.usage is None:
            raise ValueError("training samples need an edge usage record")
        plan = make_dropout_plan(s.usage, config.dropout_p, graph, config.pair_inverses,
                                 seed=[config.seed, step, i])
        views.append({nid: (GraphView(graph, masked) if masked else base_view)
                      for nid, masked in plan.items()})
    return views


def compute_gradients(samples, params, config, graph, step=0, base_view=None):
    """Loss and parameter gradients of one batch under traversal dropout."""
    base_view = base_view or graph.full_view()
    views = _dropout_views(samples, graph, config, step, base_view)
    programs = [s.program for s in samples]
    projector = NeuralProjector(params, record=True)
    answers, traces = execute_batch(programs, projector, views, capture=True)
    weights = sample_weights(samples, config.sample_weighting)
    total = params.zeros_like()
    loss = 0.0
    for s, pred, trace, w in zip(samples, answers, traces, weights):
        sample_loss, grad_pred = bce_loss(pred, s.answers, config.adversarial_temperature)
        loss += w * sample_loss

        def project_backward(i, g, trace=trace):
            rnd, slot = trace.projection_slots[i]
            grads, gx = gnn_backward(projector.rounds[rnd][slot], g,
                                     need_input_grad=not config.gradient_gating)
            add_grads(total, grads)
            return gx

        backprop_program(s.program, trace, w * grad_pred, project_backward, gate=config.gradient_gating)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in total.values()):
        bad = [k for k, g in total.items() if not np.all(np.isfinite(g))]
        raise NumericError(f"non-finite loss {loss} or gradients in {bad} at step {step}")
    return float(loss), total


def train_step(samples, params, opt_state, config, graph, base_view=None):
    """One optimizer step on a batch; returns ``(params, opt_state, loss)``."""
    loss, grads = compute_gradients(samples, params, config, graph, opt_state.step, base_view)
    params, opt_state = adaptive_moment_update(params, grads, opt_state, config.learning_rate)
    return params, opt_state, loss


@dataclass
class TrainResult:
    params: object
    opt_state: OptimizerState
    losses: list = field(default_factory=list)


def train(samples, params, config, graph, log_path=None, checkpoint_path=None,
          checkpoint_every=0, callback=None, valid_fn=None, valid_every=0):
    """Run ``config.iterations`` steps over randomly drawn batches.

    ``callback(step, params, loss)`` runs after every step; returning True
    stops training early.  The CSV log holds step, loss, wall time and, every
    ``valid_every`` steps, ``valid_fn(params)``.
    """
    if not samples:
        raise ValueError("no training samples")
    opt_state = OptimizerState.for_params(params)
    base_view = graph.full_view()
    losses = []
    start = time.perf_counter()
    log_file = open(log_path, "w", newline="", encoding="utf-8") if log_path else None
    try:
        writer = csv.writer(log_file) if log_file else None
        if writer:
            writer.writerow(["step", "loss", "wall_time", "valid_mrr"])
        for _ in range(config.iterations):
            step = opt_state.step
            rng = np.random.default_rng([config.seed, step, 1])
            idx = rng.choice(len(samples), size=min(config.batch_size, len(samples)), replace=False)
            batch = [samples[i] for i in sorted(idx)]
            params, opt_state, loss = train_step(batch, params, opt_state, config, graph, base_view)
            losses.append(loss)
            valid = ""
            if valid_fn is not None and valid_every and opt_state.step % valid_every == 0:
                valid = valid_fn(params)
                logger.info("step %d valid mrr %.4f", opt_state.step, valid)
                valid = repr(float(valid))
            if writer:
                writer.writerow([opt_state.step, repr(loss), f"{time.perf_counter() - start:.3f}", valid])
            if opt_state.step % 100 == 0:
                logger.info("step %d loss %.5f", opt_state.step, loss)
            if checkpoint_path and checkpoint_every and opt_state.step % checkpoint_every == 0:
                save_checkpoint(params, checkpoint_path)
            if callback is not None and callback(opt_state.step, params, loss):
                break
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(params, checkpoint_path)
    return TrainResult(params, opt_state, losses)


def predict(samples, projector, graph, chunk=256):
    """Answer fuzzy sets of ``samples`` on the unmasked ``graph``."""
    view = graph.full_view()
    preds = []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        preds.extend(execute_batch([s.program for s in part], projector, [view] * len(part)))
    return preds


def query_mrr(samples, params, graph, answers="all"):
    """Macro MRR of the neural model on ``samples``; ``answers="all"`` ranks every answer (training MRR)."""
    report = evaluate(samples, predict(samples, NeuralProjector(params), graph), answers=answers)
    return float(np.mean([m["mrr"] for m in report.per_type.values()]))
