"""Brute-force reference implementations used only by the tests."""

import math

import numpy as np


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]


def full_match_optimum(treated, controls, edge_cost):
    """Minimum total within-set distance over all full matchings of the given units.

    ``edge_cost`` maps admissible (treated, control) pairs to distances. Every
    listed unit must be placed in a set, each set being one treated with one
    or more controls or one control with one or more treated, and every
    treated-control pair inside a set must be admissible.
    """
    tset = set(treated)
    best = math.inf
    for part in set_partitions(list(treated) + list(controls)):
        total = 0
        ok = True
        for block in part:
            ts = [u for u in block if u in tset]
            cs = [u for u in block if u not in tset]
            if not ts or not cs or (len(ts) > 1 and len(cs) > 1):
                ok = False
                break
            for t in ts:
                for c in cs:
                    if (t, c) not in edge_cost:
                        ok = False
                        break
                    total += edge_cost[(t, c)]
                if not ok:
                    break
            if not ok:
                break
        if ok and total < best:
            best = total
    return best


def greedy_cover_cost(edge_t, edge_c, cost):
    """Each treated takes its nearest control, then uncovered controls take their nearest treated."""
    chosen = set()
    for t in np.unique(edge_t):
        ks = np.flatnonzero(edge_t == t)
        chosen.add(int(ks[np.argmin(cost[ks])]))
    covered = {int(edge_c[k]) for k in chosen}
    for c in np.unique(edge_c):
        if int(c) in covered:
            continue
        ks = np.flatnonzero(edge_c == c)
        chosen.add(int(ks[np.argmin(cost[ks])]))
    return sum(cost[k] for k in chosen)


def dense_cluster_sandwich(X, y, w, clusters):
    """WLS with the CR0 cluster sandwich times G/(G-1), written out directly."""
    W = np.diag(w)
    bread = np.linalg.inv(X.T @ W @ X)
    beta = bread @ X.T @ W @ y
    e = y - X @ beta
    meat = np.zeros((X.shape[1], X.shape[1]))
    groups = sorted(set(clusters))
    for g in groups:
        idx = [i for i, c in enumerate(clusters) if c == g]
        sg = sum(w[i] * e[i] * X[i] for i in idx)
        meat += np.outer(sg, sg)
    G = len(groups)
    return beta, bread @ meat @ bread * G / (G - 1)
