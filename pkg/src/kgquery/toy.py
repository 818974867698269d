"""Small synthetic knowledge graphs with learnable relational patterns."""

import json
import os

import numpy as np

from .graph import build_splits

RELATIONS = ("next", "prev", "peer", "hop2", "tag")


def synthetic_triplets(num_entities=100, num_groups=10, seed=0):
    """Named triplets over ``e0..e{n-1}`` arranged in groups on a ring.

    ``next`` links each entity to two members of the following group and
    ``prev`` is its exact inverse; ``peer`` is symmetric within a group;
    ``hop2`` composes ``next`` with ``peer``; ``tag`` points every entity at
    one hub of its own group.
    """
    rng = np.random.default_rng(seed)
    size = num_entities // num_groups
    group = np.arange(num_entities) // size % num_groups
    members = [np.flatnonzero(group == g) for g in range(num_groups)]
    trip = set()
    nxt = {}
    for e in range(num_entities):
        nb = members[(group[e] + 1) % num_groups]
        nxt[e] = rng.choice(nb, size=2, replace=False).tolist()
        for t in nxt[e]:
            trip.add((e, "next", t))
            trip.add((t, "prev", e))
    peer = {e: set() for e in range(num_entities)}
    for g in range(num_groups):
        m = members[g]
        for _ in range(len(m)):
            a, b = rng.choice(m, size=2, replace=False).tolist()
            peer[a].add(b)
            peer[b].add(a)
            trip.add((a, "peer", b))
            trip.add((b, "peer", a))
    for e in range(num_entities):
        t = nxt[e][0]
        for p in sorted(peer[t])[:1]:
            trip.add((e, "hop2", p))
        trip.add((e, "tag", int(members[group[e]][0])))
    return [(f"e{h}", r, f"e{t}") for h, r, t in sorted(trip, key=lambda x: (x[0], RELATIONS.index(x[1]), x[2]))]


def synthetic_named_splits(num_entities=100, num_groups=10, holdout=0.1, seed=0):
    """Split name -> triplets, with ``holdout`` of the edges missing from train.

    Half of the held-out edges appear from valid on, the other half only in
    test, so train ⊂ valid ⊂ test.
    """
    trip = synthetic_triplets(num_entities, num_groups, seed)
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(len(trip))
    n_out = int(round(holdout * len(trip)))
    test_only = set(order[: n_out // 2].tolist())
    valid_only = set(order[n_out // 2: n_out].tolist())
    train = [t for i, t in enumerate(trip) if i not in test_only and i not in valid_only]
    valid = [t for i, t in enumerate(trip) if i not in test_only]
    return {"train": train, "valid": valid, "test": list(trip)}


def synthetic_splits(num_entities=100, num_groups=10, holdout=0.1, seed=0):
    return build_splits(synthetic_named_splits(num_entities, num_groups, holdout, seed))


def write_synthetic(directory, **kwargs):
    """Write train/valid/test triple files plus ``manifest.json``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    named = synthetic_named_splits(**kwargs)
    manifest = {}
    for split, trip in named.items():
        name = f"{split}.txt"
        with open(os.path.join(directory, name), "w", encoding="utf-8", newline="\n") as f:
            f.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in trip)
        manifest[split] = name
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
