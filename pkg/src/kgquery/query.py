"""Query ASTs, the s-expression syntax, the query-type catalog and postfix compilation.

Grammar::

    query := (E <entity>)
           | (P <relation> fwd|inv query)
           | (AND query query)
           | (OR query query)
           | (NOT query)

Tokens containing whitespace, parentheses or quotes are written in double
quotes with backslash escapes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import GrammarError, QuerySyntaxError, ResolutionError


@dataclass(frozen=True)
class Anchor:
    entity: int


@dataclass(frozen=True)
class Projection:
    relation: int  # edge relation id; ids >= |R| are inverses
    child: "Node"


@dataclass(frozen=True)
class And:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Or:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Not:
    child: "Node"


Node = Anchor | Projection | And | Or | Not


def children(node):
    if isinstance(node, Anchor):
        return ()
    if isinstance(node, (Projection, Not)):
        return (node.child,)
    return (node.left, node.right)


def preorder(node):
    """Nodes in pre-order; a node's position in this list is its node id."""
    out = []
    stack = [node]
    while stack:
        n = stack.pop()
        out.append(n)
        stack.extend(reversed(children(n)))
    return out


def node_count(node):
    return len(preorder(node))


def depth(node):
    return 1 + max((depth(c) for c in children(node)), default=0)


def validate(ast):
    if isinstance(ast, Not):
        raise GrammarError("NOT cannot be the root of a query")
    for n in preorder(ast):
        if not isinstance(n, (Anchor, Projection, And, Or, Not)):
            raise GrammarError(f"not a query node: {n!r}")
    return ast


def projection_node_ids(ast):
    return [i for i, n in enumerate(preorder(ast)) if isinstance(n, Projection)]


def subquery(ast, node_id):
    return preorder(ast)[node_id]


# ---------------------------------------------------------------------------
# s-expression syntax

_TOKEN = re.compile(r'(\()|(\))|"((?:[^"\\]|\\.)*)"|([^\s()"]+)')
_PLAIN = re.compile(r'[^\s()"\\]+')


def _tokenize(text):
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            raise QuerySyntaxError("unterminated quoted token", position=pos)
        start = pos
        if m.group(1):
            tokens.append(("(", None, start))
        elif m.group(2):
            tokens.append((")", None, start))
        elif m.group(3) is not None:
            tokens.append(("atom", re.sub(r"\\(.)", r"\1", m.group(3)), start))
        else:
            tokens.append(("atom", m.group(4), start))
        pos = m.end()
    return tokens


def _quote(token):
    if _PLAIN.fullmatch(token) and token not in ("E", "P", "AND", "OR", "NOT"):
        return token
    return '"' + token.replace("\\", "\\\\").replace('"', '\\"') + '"'


class _Parser:
    def __init__(self, text, entity_vocab, relation_vocab):
        self.tokens = _tokenize(text)
        self.i = 0
        self.end = len(text)
        self.entities = entity_vocab
        self.relations = relation_vocab
        self.num_relations = len(relation_vocab)

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("eof", None, self.end)

    def take(self, kind, what):
        tok = self.peek()
        if tok[0] != kind:
            found = "end of input" if tok[0] == "eof" else repr(tok[1] or tok[0])
            raise QuerySyntaxError(f"expected {what}, found {found}", position=tok[2])
        self.i += 1
        return tok

    def query(self):
        self.take("(", "'('")
        _, op, pos = self.take("atom", "an operator")
        if op == "E":
            _, name, npos = self.take("atom", "an entity")
            if name not in self.entities:
                raise ResolutionError(f"unknown entity {name!r} at position {npos}")
            node = Anchor(self.entities[name])
        elif op == "P":
            _, name, npos = self.take("atom", "a relation")
            if name not in self.relations:
                raise ResolutionError(f"unknown relation {name!r} at position {npos}")
            _, direction, dpos = self.take("atom", "'fwd' or 'inv'")
            if direction not in ("fwd", "inv"):
                raise QuerySyntaxError(f"expected 'fwd' or 'inv', found {direction!r}", position=dpos)
            rel = self.relations[name]
            if direction == "inv":
                rel += self.num_relations
            node = Projection(rel, self.query())
        elif op in ("AND", "OR"):
            left = self.query()
            right = self.query()
            node = And(left, right) if op == "AND" else Or(left, right)
        elif op == "NOT":
            node = Not(self.query())
        else:
            raise QuerySyntaxError(f"unknown operator {op!r}", position=pos)
        self.take(")", "')'")
        return node


def parse_query(text, graph=None, *, entity_vocab=None, relation_vocab=None):
    """Parse an s-expression query, resolving names against a graph's vocabularies."""
    if graph is not None:
        entity_vocab = graph.entity_vocab
        relation_vocab = graph.relation_vocab
    if entity_vocab is None or relation_vocab is None:
        raise TypeError("parse_query needs a graph or both vocabularies")
    parser = _Parser(text, entity_vocab, relation_vocab)
    ast = parser.query()
    tok = parser.peek()
    if tok[0] != "eof":
        raise QuerySyntaxError("trailing input after query", position=tok[2])
    if isinstance(ast, Not):
        raise GrammarError("NOT cannot be the root of a query")
    return ast


def render_query(ast, graph=None, *, entity_names=None, relation_names=None):
    """Canonical s-expression for an AST (single spaces, no trailing whitespace)."""
    if graph is not None:
        entity_names = graph.entity_names
        relation_names = graph.relation_names
    num_relations = len(relation_names)

    def go(n):
        if isinstance(n, Anchor):
            return f"(E {_quote(entity_names[n.entity])})"
        if isinstance(n, Projection):
            if n.relation < num_relations:
                name, direction = relation_names[n.relation], "fwd"
            else:
                name, direction = relation_names[n.relation - num_relations], "inv"
            return f"(P {_quote(name)} {direction} {go(n.child)})"
        if isinstance(n, Not):
            return f"(NOT {go(n.child)})"
        op = "AND" if isinstance(n, And) else "OR"
        return f"({op} {go(n.left)} {go(n.right)})"

    return go(ast)


# ---------------------------------------------------------------------------
# query-type catalog
#
# Skeletons use ("e",) for an anchor slot and ("p", child) for a projection
# slot.  Slots are numbered in postfix (execution) order.

def _p(child):
    return ("p", child)


_E = ("e",)

_SKELETONS = {
    "1p": _p(_E),
    "2p": _p(_p(_E)),
    "3p": _p(_p(_p(_E))),
    "2i": ("and", _p(_E), _p(_E)),
    "3i": ("and", _p(_E), ("and", _p(_E), _p(_E))),
    "pi": ("and", _p(_p(_E)), _p(_E)),
    "ip": _p(("and", _p(_E), _p(_E))),
    "2u": ("or", _p(_E), _p(_E)),
    "up": _p(("or", _p(_E), _p(_E))),
    "2in": ("and", _p(_E), ("not", _p(_E))),
    "3in": ("and", _p(_E), ("and", _p(_E), ("not", _p(_E)))),
    "inp": _p(("and", _p(_E), ("not", _p(_E)))),
    "pin": ("and", _p(_p(_E)), ("not", _p(_E))),
    "pni": ("and", ("not", _p(_p(_E))), _p(_E)),
}

QUERY_TYPES = tuple(_SKELETONS)
TRAINABLE_TYPES = ("1p", "2p", "3p", "2i", "3i", "2in", "3in", "inp", "pni", "pin")
EPFO_TYPES = ("1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up")
NEGATION_TYPES = ("2in", "3in", "inp", "pin", "pni")


def _count(skeleton, kind):
    n = int(skeleton[0] == kind)
    return n + sum(_count(c, kind) for c in skeleton[1:])


@dataclass(frozen=True)
class QueryTypeTemplate:
    name: str
    skeleton: tuple = field(repr=False)
    trainable: bool

    @property
    def num_anchors(self):
        return _count(self.skeleton, "e")

    @property
    def num_relations(self):
        return _count(self.skeleton, "p")


TEMPLATES = {name: QueryTypeTemplate(name, sk, name in TRAINABLE_TYPES)
             for name, sk in _SKELETONS.items()}


def instantiate_template(template, anchors, relations):
    """Fill a template's anchor and relation slots in postfix order."""
    if isinstance(template, str):
        template = TEMPLATES[template]
    anchors, relations = list(anchors), list(relations)
    if len(anchors) != template.num_anchors or len(relations) != template.num_relations:
        raise ValueError(
            f"{template.name} needs {template.num_anchors} anchors and "
            f"{template.num_relations} relations, got {len(anchors)} and {len(relations)}")
    a, r = iter(anchors), iter(relations)

    def build(sk):
        kind = sk[0]
        if kind == "e":
            return Anchor(int(next(a)))
        if kind == "p":
            child = build(sk[1])
            return Projection(int(next(r)), child)
        if kind == "not":
            return Not(build(sk[1]))
        left = build(sk[1])
        right = build(sk[2])
        return And(left, right) if kind == "and" else Or(left, right)

    return build(template.skeleton)


def match_template(ast):
    """Name of the catalog type whose skeleton matches the AST, or None."""
    def shape(n):
        if isinstance(n, Anchor):
            return _E
        if isinstance(n, Projection):
            return _p(shape(n.child))
        if isinstance(n, Not):
            return ("not", shape(n.child))
        return ("and" if isinstance(n, And) else "or", shape(n.left), shape(n.right))

    s = shape(ast)
    for name, sk in _SKELETONS.items():
        if sk == s:
            return name
    return None


# ---------------------------------------------------------------------------
# postfix programs

@dataclass(frozen=True)
class PushAnchor:
    entity: int


@dataclass(frozen=True)
class Project:
    relation: int


@dataclass(frozen=True)
class AndOp:
    pass


@dataclass(frozen=True)
class OrOp:
    pass


@dataclass(frozen=True)
class NotOp:
    pass


ARITY = {PushAnchor: 0, Project: 1, AndOp: 2, OrOp: 2, NotOp: 1}


@dataclass(frozen=True)
class PostfixProgram:
    instructions: tuple
    max_stack_depth: int
    source_node_ids: tuple  # instruction index -> pre-order AST node id

    def __len__(self):
        return len(self.instructions)

    def operands(self):
        """For each instruction, the indices of the instructions producing its operands (left first)."""
        stack, out = [], []
        for i, ins in enumerate(self.instructions):
            k = ARITY[type(ins)]
            args = tuple(stack[len(stack) - k:]) if k else ()
            del stack[len(stack) - k:]
            out.append(args)
            stack.append(i)
        return out

    def num_projections(self):
        return sum(isinstance(ins, Project) for ins in self.instructions)


def simulate_depth(instructions):
    """Maximum stack depth of a program; raises if it underflows or leaves != 1 value."""
    depth_, peak = 0, 0
    for i, ins in enumerate(instructions):
        k = ARITY[type(ins)]
        if depth_ < k:
            raise GrammarError(f"stack underflow at instruction {i}")
        depth_ += 1 - k
        peak = max(peak, depth_)
    if depth_ != 1:
        raise GrammarError(f"program leaves {depth_} values on the stack")
    return peak


def compile_postfix(ast):
    """Emit children first (left to right), then the operator."""
    instructions, sources = [], []

    def emit(n, nid):
        child_id = nid + 1
        for c in children(n):
            emit(c, child_id)
            child_id += node_count(c)
        if isinstance(n, Anchor):
            instructions.append(PushAnchor(n.entity))
        elif isinstance(n, Projection):
            instructions.append(Project(n.relation))
        elif isinstance(n, And):
            instructions.append(AndOp())
        elif isinstance(n, Or):
            instructions.append(OrOp())
        else:
            instructions.append(NotOp())
        sources.append(nid)

    emit(ast, 0)
    return PostfixProgram(tuple(instructions), simulate_depth(instructions), tuple(sources))


def format_program(program, graph=None):
    parts = []
    for ins in program.instructions:
        if isinstance(ins, PushAnchor):
            parts.append("{%s}" % (graph.entity_names[ins.entity] if graph else ins.entity))
        elif isinstance(ins, Project):
            parts.append("P[%s]" % (graph.relation_label(ins.relation) if graph else ins.relation))
        else:
            parts.append({AndOp: "C", OrOp: "D", NotOp: "N"}[type(ins)])
    return " ".join(parts)
