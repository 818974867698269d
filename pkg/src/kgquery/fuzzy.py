"""Fuzzy sets over entities and product fuzzy-logic operations.

A fuzzy set is a float64 numpy vector of membership probabilities, one per
entity.  Operations return new arrays and never modify their inputs.
"""

import math

import numpy as np


def as_fuzzy(values):
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"fuzzy set must be a vector, got shape {x.shape}")
    return x


def singleton(entity, size):
    if not 0 <= entity < size:
        raise IndexError(f"entity {entity} out of range for a universe of {size}")
    x = np.zeros(size)
    x[entity] = 1.0
    return x


def _pair(x, y):
    x, y = as_fuzzy(x), as_fuzzy(y)
    if x.shape != y.shape:
        raise ValueError(f"fuzzy sets differ in length: {len(x)} vs {len(y)}")
    return x, y


def conj(x, y):
    """Product t-norm: ``x * y``."""
    x, y = _pair(x, y)
    return x * y


def disj(x, y):
    """Probabilistic sum: ``x + y - x * y``."""
    x, y = _pair(x, y)
    return x + y - x * y


def neg(x):
    return 1.0 - as_fuzzy(x)


def cardinality(x, threshold=0.5, mode="sum"):
    """Size estimate of a fuzzy set from the members above ``threshold``.

    ``mode="sum"`` adds up the surviving probabilities and rounds half up;
    ``mode="count"`` counts the survivors.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    x = as_fuzzy(x)
    keep = x > threshold
    if mode == "count":
        return int(keep.sum())
    if mode != "sum":
        raise ValueError(f"unknown cardinality mode {mode!r}")
    return int(math.floor(float(x[keep].sum()) + 0.5))


def top_k(x, k, min_prob=0.0):
    """Up to ``k`` members above ``min_prob``, by probability descending then id ascending."""
    x = as_fuzzy(x)
    if k <= 0:
        return []
    ids = np.flatnonzero(x > min_prob)
    order = np.lexsort((ids, -x[ids]))[:k]
    return [(int(ids[i]), float(x[ids[i]])) for i in order]


def to_boolean(x, threshold=0.5):
    """Entity ids whose membership exceeds ``threshold``."""
    return set(np.flatnonzero(as_fuzzy(x) > threshold).tolist())


def indicator(entities, size):
    x = np.zeros(size)
    x[list(entities)] = 1.0
    return x
