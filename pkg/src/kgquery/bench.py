"""Query datasets over graph splits, filtered ranking metrics, cardinality metrics and inspection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.stats import rankdata

from . import fuzzy
from .errors import GenerationError, ProtocolError
from .query import (EPFO_TYPES, NEGATION_TYPES, QUERY_TYPES, TEMPLATES, TRAINABLE_TYPES, Anchor,
                    Projection, compile_postfix, instantiate_template, match_template,
                    parse_query, preorder, render_query)
from .symbolic import collect_traversed_edges, ground_enumerate

HITS_AT = (1, 3, 10)
SPLIT_GRAPHS = {
    # split -> (observed graph, graph the answers are defined on)
    "train": (None, "train"),
    "valid": ("train", "valid"),
    "test": ("valid", "test"),
}


@dataclass
class QuerySample:
    qtype: str
    ast: object
    easy: frozenset
    hard: frozenset
    usage: dict | None = None
    split: str = "test"

    @property
    def answers(self):
        return self.easy | self.hard

    @cached_property
    def program(self):
        return compile_postfix(self.ast)


def observed_graph(splits, split):
    """Graph a model may traverse when answering queries of ``split``."""
    small, large = SPLIT_GRAPHS[split]
    return splits[small or large]


def normalize_counts(counts):
    """Accept ``{type: n}`` (train keeps only trainable types) or ``{split: {type: n}}``."""
    if all(k in SPLIT_GRAPHS for k in counts):
        out = {split: dict(counts.get(split, {})) for split in SPLIT_GRAPHS}
    else:
        out = {split: {t: n for t, n in counts.items() if split != "train" or t in TRAINABLE_TYPES}
               for split in SPLIT_GRAPHS}
    for per_type in out.values():
        for t, n in per_type.items():
            if t not in TEMPLATES:
                raise ValueError(f"unknown query type {t!r}")
            if n < 0:
                raise ValueError(f"negative count for {t}")
    return out


def _incoming(graph):
    adj = {}
    for h, r, t in graph.edges.tolist():
        adj.setdefault(t, []).append((h, r))
    return adj


def _sample_ast(template, adj, targets, rng):
    """Ground a template top-down from a random answer entity; None on a dead end."""

    # slots are filled in postfix order, matching instantiate_template
    def collect(sk, target, anchors, relations):
        kind = sk[0]
        if kind == "e":
            anchors.append(target)
            return True
        if kind == "p":
            options = adj.get(target)
            if not options:
                return False
            head, rel = options[rng.integers(len(options))]
            if not collect(sk[1], head, anchors, relations):
                return False
            relations.append(rel)
            return True
        if kind == "not":
            return collect(sk[1], int(targets[rng.integers(len(targets))]), anchors, relations)
        return collect(sk[1], target, anchors, relations) and collect(sk[2], target, anchors, relations)

    target = int(targets[rng.integers(len(targets))])
    anchors, relations = [], []
    if not collect(template.skeleton, target, anchors, relations):
        return None
    return instantiate_template(template, anchors, relations)


def generate_split(splits, split, qtype, count, max_answers=100, seed=0, budget=None):
    """Sample ``count`` distinct queries of one type for one split."""
    small_name, large_name = SPLIT_GRAPHS[split]
    large = splits[large_name]
    small = splits[small_name] if small_name else None
    large_view, small_view = large.full_view(), small.full_view() if small else None
    template = TEMPLATES[qtype]
    adj = _incoming(large)
    targets = np.array(sorted(adj), dtype=np.int64)
    rng = np.random.default_rng([seed, list(SPLIT_GRAPHS).index(split), QUERY_TYPES.index(qtype)])
    budget = budget if budget is not None else 2000 + 500 * count
    samples, seen = [], set()
    attempts = 0
    while len(samples) < count:
        if attempts >= budget or len(targets) == 0:
            raise GenerationError(
                f"could not sample {count} {qtype} queries for {split} within {budget} attempts "
                f"(got {len(samples)})")
        attempts += 1
        ast = _sample_ast(template, adj, targets, rng)
        if ast is None or ast in seen:
            continue
        full = ground_enumerate(ast, large_view)
        if not full or len(full) > max_answers or len(full) >= large.num_entities:
            continue
        if small is None:
            easy, hard = frozenset(full), frozenset()
        else:
            observed = ground_enumerate(ast, small_view)
            easy = frozenset(full & observed)
            hard = frozenset(full - observed)
            if not hard:
                continue
        seen.add(ast)
        usage = collect_traversed_edges(ast, large_view) if split == "train" else None
        samples.append(QuerySample(qtype, ast, easy, hard, usage, split))
    return samples


def generate_dataset(splits, counts, max_answers=100, seed=0):
    """Sample query datasets for train/valid/test.

    Train answers come from the train graph and are all easy.  Valid (test)
    easy answers are reachable on the train (valid) graph; hard answers only
    on the valid (test) graph.
    """
    if max_answers < 1:
        raise ValueError("max_answers must be >= 1")
    counts = normalize_counts(counts)
    out = {}
    for split in SPLIT_GRAPHS:
        samples = []
        for qtype in QUERY_TYPES:
            n = counts[split].get(qtype, 0)
            if n:
                samples.extend(generate_split(splits, split, qtype, n, max_answers, seed))
        out[split] = samples
    return out


def check_sample(sample, splits):
    """Re-derive a sample's answers with the oracle; raises ProtocolError on mismatch."""
    small_name, large_name = SPLIT_GRAPHS[sample.split]
    full = ground_enumerate(sample.ast, splits[large_name].full_view())
    if sample.easy & sample.hard:
        raise ProtocolError("easy and hard answers overlap")
    if sample.answers != full:
        raise ProtocolError("easy | hard differs from the answers on the larger graph")
    if small_name is None:
        if sample.hard:
            raise ProtocolError("train samples have no hard answers")
    else:
        observed = ground_enumerate(sample.ast, splits[small_name].full_view())
        if sample.easy != full & observed:
            raise ProtocolError("easy answers differ from the observed-graph answers")
        if not sample.hard:
            raise ProtocolError("evaluation sample without hard answers")


# ---------------------------------------------------------------------------
# dataset files

def write_dataset(samples, path, graph):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(json.dumps({"type": s.qtype, "query": render_query(s.ast, graph),
                                "easy": sorted(s.easy), "hard": sorted(s.hard)}) + "\n")


def read_dataset(path, graph, split="test"):
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ast = parse_query(obj["query"], graph)
                qtype = obj["type"]
                easy, hard = frozenset(obj["easy"]), frozenset(obj["hard"])
            except (KeyError, ValueError) as e:
                raise ProtocolError(f"{path}:{lineno}: {e}") from None
            if qtype not in TEMPLATES or match_template(ast) != qtype:
                raise ProtocolError(f"{path}:{lineno}: query does not have type {qtype!r}")
            samples.append(QuerySample(qtype, ast, easy, hard, None, split))
    return samples


def attach_usage(samples, graph):
    view = graph.full_view()
    for s in samples:
        if s.usage is None:
            s.usage = collect_traversed_edges(s.ast, view)
    return samples


def statistics_table(dataset):
    lines = ["| split | " + " | ".join(QUERY_TYPES) + " | total |",
             "|---|" + "---|" * (len(QUERY_TYPES) + 1)]
    for split in SPLIT_GRAPHS:
        samples = dataset.get(split, [])
        per = [sum(s.qtype == t for s in samples) for t in QUERY_TYPES]
        lines.append(f"| {split} | " + " | ".join(str(n) for n in per) + f" | {len(samples)} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ranking metrics

def expected_rank(pred, answer, filter_out=()):
    """Rank of ``answer`` among unfiltered entities, ties counted as half."""
    pred = np.asarray(pred, dtype=np.float64)
    keep = np.ones(len(pred), dtype=bool)
    keep[list(filter_out)] = False
    keep[answer] = False
    others = pred[keep]
    s = pred[answer]
    return 1.0 + float(np.sum(others > s)) + 0.5 * float(np.sum(others == s))


def answer_ranks(pred, answers, ranked):
    """Expected ranks of each entity in ``ranked`` against every entity outside ``answers``."""
    pred = np.asarray(pred, dtype=np.float64)
    keep = np.ones(len(pred), dtype=bool)
    keep[list(answers)] = False
    negatives = np.sort(pred[keep])
    scores = pred[sorted(ranked)]
    above = np.searchsorted(negatives, scores, side="right")
    below = np.searchsorted(negatives, scores, side="left")
    return 1.0 + (len(negatives) - above) + 0.5 * (above - below)


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties; nan if either side is constant."""
    rx = rankdata(np.asarray(x, dtype=np.float64))
    ry = rankdata(np.asarray(y, dtype=np.float64))
    if len(rx) != len(ry):
        raise ValueError("length mismatch")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return float("nan")
    return max(-1.0, min(1.0, float(dx @ dy) / denom))


def cardinality_metrics(preds, truths, threshold=0.5, mode="sum"):
    """Returns ``(mape, spearman_rho, excluded)``; samples with zero truth are excluded."""
    if len(preds) != len(truths):
        raise ValueError("predictions and truths differ in length")
    predicted, actual, excluded = [], [], 0
    for pred, truth in zip(preds, truths):
        if truth <= 0:
            excluded += 1
            continue
        predicted.append(pred if np.isscalar(pred) else fuzzy.cardinality(pred, threshold, mode))
        actual.append(truth)
    if not actual:
        return float("nan"), float("nan"), excluded
    predicted, actual = np.array(predicted, dtype=np.float64), np.array(actual, dtype=np.float64)
    mape = float(np.mean(np.abs(predicted - actual) / actual))
    rho = spearman(predicted, actual) if len(actual) > 1 else float("nan")
    return mape, rho, excluded


@dataclass
class MetricsReport:
    per_type: dict = field(default_factory=dict)
    avg_p: float = float("nan")
    avg_n: float = float("nan")
    mape: float = float("nan")
    spearman: float = float("nan")
    cardinality_excluded: int = 0

    def to_dict(self):
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        return {
            "avg_p": clean(self.avg_p),
            "avg_n": clean(self.avg_n),
            "mape": clean(self.mape),
            "spearman": clean(self.spearman),
            "cardinality_excluded": self.cardinality_excluded,
            "per_type": {t: {k: clean(v) for k, v in m.items()} for t, m in self.per_type.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self, metrics=("mrr", "h1", "h3", "h10")):
        """Percentages, one row per metric, columns avg_p, avg_n and the query types."""
        def pct(v):
            return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.1f}"

        head = ["avg_p", "avg_n", *QUERY_TYPES]
        lines = [f"| metric | {' | '.join(head)} |", "|---|" + "---|" * len(head)]
        for metric in metrics:
            avg_p, avg_n = (self.avg_p, self.avg_n) if metric == "mrr" else _averages(self.per_type, metric)
            row = [pct(avg_p), pct(avg_n)] + [pct(self.per_type.get(t, {}).get(metric)) for t in QUERY_TYPES]
            lines.append(f"| {metric} | {' | '.join(row)} |")
        return "\n".join(lines) + "\n"


def _averages(per_type, metric):
    def avg(types):
        vals = [per_type[t][metric] for t in types if t in per_type]
        return float(np.mean(vals)) if vals else float("nan")

    return avg(EPFO_TYPES), avg(NEGATION_TYPES)


def evaluate(samples, preds, answers="hard", threshold=0.5, cardinality_mode="sum"):
    """Filtered MRR / H@K per query type, avg_p / avg_n, and cardinality metrics.

    Each hard answer (every answer with ``answers="all"``) is ranked against
    the entities that are not answers of the query.  Sample scores are
    averaged within a type, then types are averaged into avg_p and avg_n.
    """
    if len(samples) != len(preds):
        raise ProtocolError(f"{len(samples)} samples but {len(preds)} predictions")
    per_sample = {}
    card = {}
    for s, pred in zip(samples, preds):
        ranked = s.hard if answers == "hard" else s.answers
        if not ranked:
            raise ProtocolError(f"a {s.qtype} sample has no {answers} answers to rank")
        ranks = answer_ranks(pred, s.answers, ranked)
        row = {"mrr": float(np.mean(1.0 / ranks))}
        for k in HITS_AT:
            row[f"h{k}"] = float(np.mean(ranks <= k))
        per_sample.setdefault(s.qtype, []).append(row)
        card.setdefault(s.qtype, ([], []))
        card[s.qtype][0].append(pred)
        card[s.qtype][1].append(len(s.answers))

    report = MetricsReport()
    all_preds, all_truths = [], []
    for t in QUERY_TYPES:
        if t not in per_sample:
            continue
        rows = per_sample[t]
        m = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        m["count"] = len(rows)
        mape, rho, excluded = cardinality_metrics(*card[t], threshold, cardinality_mode)
        m["mape"], m["spearman"] = mape, rho
        report.per_type[t] = m
        all_preds += card[t][0]
        all_truths += card[t][1]
    report.avg_p, report.avg_n = _averages(report.per_type, "mrr")
    report.mape, report.spearman, report.cardinality_excluded = cardinality_metrics(
        all_preds, all_truths, threshold, cardinality_mode)
    return report


def constant_baseline_mrr(samples, num_entities):
    """MRR of a predictor that scores every entity the same."""
    preds = [np.zeros(num_entities) for _ in samples]
    rows = []
    for s, p in zip(samples, preds):
        rows.append(float(np.mean(1.0 / answer_ranks(p, s.answers, s.hard))))
    return float(np.mean(rows))


# ---------------------------------------------------------------------------
# inspection

def _label(names, eid, prob):
    return f"{names[eid]} ({prob:.3f})"


def inspect(sample, trace, splits, n_easy=3, n_hard=6, min_prob=0.1):
    """Text report of the top members of every intermediate fuzzy set.

    Per AST node: up to ``n_easy`` top entities that are easy at that node,
    then the ``n_hard`` best remaining predictions, each tagged ``hard`` when
    it is a hard answer of the node's sub-query and ``false-positive``
    otherwise.  Only memberships above ``min_prob`` are listed.
    """
    small_name, large_name = SPLIT_GRAPHS[sample.split]
    large = splits[large_name]
    small = splits[small_name] if small_name else None
    names = large.entity_names
    values = trace.values
    lines = [f"query [{sample.qtype}] {render_query(sample.ast, large)}"]
    for nid, node in enumerate(preorder(sample.ast)):
        full = ground_enumerate(node, large.full_view())
        observed = ground_enumerate(node, small.full_view()) if small is not None else full
        easy = full & observed
        hard = full - observed
        top = fuzzy.top_k(values[nid], len(values[nid]), min_prob)
        easy_col = [(e, p) for e, p in top if e in easy][:n_easy]
        rest = [(e, p) for e, p in top if e not in easy][:n_hard]
        lines.append(f"node {nid} {_describe(node, large)}")
        lines.append("  easy: " + (", ".join(_label(names, e, p) for e, p in easy_col) or "-"))
        tagged = [f"{_label(names, e, p)} [{'hard' if e in hard else 'false-positive'}]" for e, p in rest]
        lines.append("  hard: " + (", ".join(tagged) or "-"))
    return "\n".join(lines) + "\n"


def _describe(node, graph):
    if isinstance(node, Anchor):
        return f"anchor {graph.entity_names[node.entity]}"
    if isinstance(node, Projection):
        return f"projection {graph.relation_label(node.relation)}"
    return type(node).__name__.lower()
