"""Complex logical query answering over knowledge graphs with fuzzy sets and a GNN projector."""

from .errors import KGQueryError
from .graph import GraphView, KnowledgeGraph, SplitSet, build_splits, load_splits
from .query import compile_postfix, parse_query, render_query

__version__ = "0.1.0"

__all__ = ["GraphView", "KGQueryError", "KnowledgeGraph", "SplitSet", "build_splits",
           "compile_postfix", "load_splits", "parse_query", "render_query"]
