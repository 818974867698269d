"""Knowledge-graph storage: vocabularies, inverse-augmented edges, masked views."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import SplitError, TripleParseError

SPLIT_NAMES = ("train", "valid", "test")


def _frozen(array):
    array.setflags(write=False)
    return array


class KnowledgeGraph:
    """An immutable multi-relational graph.

    Every triplet ``(h, r, t)`` is stored twice: as edge ``(h, r, t)`` with id
    ``i`` and as its flipped twin ``(t, r + R, h)`` with id ``i + M``, where
    ``R`` is the number of original relations and ``M`` the triplet count.
    Incoming edges are indexed in a compressed layout keyed by
    ``(tail, edge relation)`` with heads ascending inside each slice.
    """

    def __init__(self, entity_vocab, relation_vocab, triplets):
        self.entity_vocab = dict(entity_vocab)
        self.relation_vocab = dict(relation_vocab)
        self.entity_names = _names_from_vocab(self.entity_vocab)
        self.relation_names = _names_from_vocab(self.relation_vocab)
        self.num_entities = len(self.entity_names)
        self.num_relations = len(self.relation_names)
        self.num_edge_relations = 2 * self.num_relations

        triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        if len(triplets) and (triplets[:, [0, 2]].min() < 0 or triplets[:, [0, 2]].max() >= self.num_entities):
            raise ValueError("triplet entity id out of range")
        if len(triplets) and (triplets[:, 1].min() < 0 or triplets[:, 1].max() >= self.num_relations):
            raise ValueError("triplet relation id out of range")
        self.triplets = _frozen(triplets.copy())
        self.num_triplets = len(triplets)

        h, r, t = triplets.T
        heads = np.concatenate([h, t])
        rels = np.concatenate([r, r + self.num_relations])
        tails = np.concatenate([t, h])
        self.edges = _frozen(np.stack([heads, rels, tails], axis=1))
        self.num_edges = len(self.edges)

        order = np.lexsort((heads, rels, tails))
        keys = tails[order] * self.num_edge_relations + rels[order]
        self.in_order = _frozen(order)
        self.in_ptr = _frozen(np.searchsorted(
            keys, np.arange(self.num_entities * self.num_edge_relations + 1)))

    @classmethod
    def from_named(cls, named_triplets, entity_vocab=None, relation_vocab=None):
        """Build a graph from ``(head, relation, tail)`` name tuples.

        Names missing from the given vocabularies are appended in order of
        first appearance; duplicate triplets are dropped.
        """
        entity_vocab = dict(entity_vocab or {})
        relation_vocab = dict(relation_vocab or {})
        seen = set()
        ids = []
        for h, r, t in named_triplets:
            for name in (h, t):
                if name not in entity_vocab:
                    entity_vocab[name] = len(entity_vocab)
            if r not in relation_vocab:
                relation_vocab[r] = len(relation_vocab)
            key = (entity_vocab[h], relation_vocab[r], entity_vocab[t])
            if key not in seen:
                seen.add(key)
                ids.append(key)
        return cls(entity_vocab, relation_vocab, ids)

    def inverse_relation(self, rel):
        return rel + self.num_relations if rel < self.num_relations else rel - self.num_relations

    def inverse_edge(self, edge_id):
        """Id of the flipped twin of an edge."""
        m = self.num_triplets
        return edge_id + m if edge_id < m else edge_id - m

    def relation_label(self, rel):
        if rel < self.num_relations:
            return self.relation_names[rel]
        return self.relation_names[rel - self.num_relations] + "^-1"

    def named_triplets(self):
        return {(self.entity_names[h], self.relation_names[r], self.entity_names[t])
                for h, r, t in self.triplets.tolist()}

    def to_lines(self):
        """Sorted ``head<TAB>relation<TAB>tail`` lines of the original triplets."""
        return ["\t".join(triplet) for triplet in sorted(self.named_triplets())]

    def full_view(self):
        return GraphView(self)

    def __repr__(self):
        return (f"KnowledgeGraph(entities={self.num_entities}, relations={self.num_relations}, "
                f"triplets={self.num_triplets})")


def _names_from_vocab(vocab):
    names = [None] * len(vocab)
    for name, i in vocab.items():
        if not 0 <= i < len(vocab) or names[i] is not None:
            raise ValueError("vocabulary ids must be dense and unique")
        names[i] = name
    return names


class GraphView:
    """A graph with a set of edge ids hidden from traversal and message passing."""

    def __init__(self, base, masked=()):
        self.base = base
        self.masked = frozenset(int(e) for e in masked)
        if self.masked and (min(self.masked) < 0 or max(self.masked) >= base.num_edges):
            raise ValueError("masked edge id out of range")

    @property
    def num_entities(self):
        return self.base.num_entities

    @property
    def num_edge_relations(self):
        return self.base.num_edge_relations

    @cached_property
    def active(self):
        active = np.ones(self.base.num_edges, dtype=bool)
        if self.masked:
            active[np.fromiter(self.masked, dtype=np.int64)] = False
        return _frozen(active)

    @cached_property
    def num_edges(self):
        return self.base.num_edges - len(self.masked)

    @cached_property
    def by_tail(self):
        """Unmasked edges as ``(edge_ids, heads, rels, tails)`` sorted by tail, relation, head."""
        order = self.base.in_order
        order = order[self.active[order]]
        heads, rels, tails = self.base.edges[order].T
        return tuple(_frozen(np.ascontiguousarray(a)) for a in (order, heads, rels, tails))

    @cached_property
    def by_relation(self):
        """Mapping edge relation -> (heads, tails) over unmasked edges."""
        ids, heads, rels, tails = self.by_tail
        out = {}
        order = np.argsort(rels, kind="stable")
        bounds = np.searchsorted(rels[order], np.arange(self.base.num_edge_relations + 1))
        for r in range(self.base.num_edge_relations):
            sel = order[bounds[r]:bounds[r + 1]]
            out[r] = (heads[sel], tails[sel])
        return out

    def edge_ids(self):
        return self.by_tail[0]

    def incoming_edges(self, tail, rel):
        return incoming_edges(self, tail, rel)

    def with_mask(self, masked):
        return GraphView(self.base, self.masked | frozenset(masked))


def incoming_edges(view, tail, rel):
    """Unmasked edges ``(head, rel, tail)`` as a list of ``(head, edge_id)``, heads ascending."""
    g = view.base
    if not 0 <= tail < g.num_entities:
        raise IndexError(f"entity id {tail} out of range [0, {g.num_entities})")
    if not 0 <= rel < g.num_edge_relations:
        raise IndexError(f"edge relation id {rel} out of range [0, {g.num_edge_relations})")
    key = tail * g.num_edge_relations + rel
    ids = g.in_order[g.in_ptr[key]:g.in_ptr[key + 1]]
    return [(int(g.edges[e, 0]), int(e)) for e in ids if e not in view.masked]


def parse_triple_lines(text):
    """Parse tab-separated triple lines into name tuples (duplicates kept)."""
    triplets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise TripleParseError(f"expected 3 tab-separated fields, got {len(fields)}", line=lineno)
        if any(f == "" for f in fields):
            raise TripleParseError("empty field", line=lineno)
        triplets.append(tuple(fields))
    return triplets


def load_triples(source):
    """Load a graph from triple-file text; ids follow first appearance."""
    triplets = parse_triple_lines(source)
    if not triplets:
        raise TripleParseError("no triplets in input")
    return KnowledgeGraph.from_named(triplets)


def read_triples(path):
    with open(path, encoding="utf-8") as f:
        return load_triples(f.read())


def write_triples(graph, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in graph.to_lines():
            f.write(line + "\n")


@dataclass(frozen=True)
class SplitSet:
    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph

    def __getitem__(self, name):
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def entity_vocab(self):
        return self.train.entity_vocab

    @property
    def relation_vocab(self):
        return self.train.relation_vocab


def build_splits(named):
    """Build a :class:`SplitSet` from a mapping split name -> list of name triplets."""
    missing = [name for name in SPLIT_NAMES if name not in named]
    if missing:
        raise SplitError(f"missing split(s): {', '.join(missing)}")
    extra = sorted(set(named) - set(SPLIT_NAMES))
    if extra:
        raise SplitError(f"unknown split(s): {', '.join(extra)}")
    for small, large in (("train", "valid"), ("valid", "test")):
        large_set = set(named[large])
        for triplet in named[small]:
            if triplet not in large_set:
                raise SplitError(
                    f"{small} triplet {'/'.join(triplet)} is missing from {large}")
    entity_vocab, relation_vocab = {}, {}
    for name in SPLIT_NAMES:
        for h, r, t in named[name]:
            for e in (h, t):
                entity_vocab.setdefault(e, len(entity_vocab))
            relation_vocab.setdefault(r, len(relation_vocab))
    graphs = {name: KnowledgeGraph.from_named(named[name], entity_vocab, relation_vocab)
              for name in SPLIT_NAMES}
    return SplitSet(**graphs)


def load_splits(manifest):
    """Load train/valid/test graphs over a shared vocabulary.

    ``manifest`` is either a mapping split -> triple-file path or the path of
    a JSON file holding such a mapping (relative paths resolve against the
    JSON file's directory).
    """
    root = ""
    if isinstance(manifest, (str, os.PathLike)):
        root = os.path.dirname(os.fspath(manifest))
        with open(manifest, encoding="utf-8") as f:
            manifest = json.load(f)
        if not isinstance(manifest, dict):
            raise SplitError("manifest must be a JSON object")
    named = {}
    for name, path in manifest.items():
        path = os.path.join(root, path)
        with open(path, encoding="utf-8") as f:
            text = f.read()
        try:
            triplets = parse_triple_lines(text)
        except TripleParseError as e:
            raise TripleParseError(f"{path}: {e}") from None
        if not triplets:
            raise TripleParseError(f"{path}: no triplets in input")
        named[name] = triplets
    return build_splits(named)
