"""Slow, direct reference computations used to check the compiled paths."""

import numpy as np


def route(tree, x):
    """Node ids visited by one row, root first."""
    path = [0]
    t = 0
    while tree.feature[t] >= 0:
        t = tree.left[t] if x[tree.feature[t]] <= tree.threshold[t] else tree.right[t]
        path.append(t)
    return path


def node_members(tree, X):
    """For each node, the list of row indices whose path passes through it."""
    members = [[] for _ in range(tree.n_nodes)]
    for i, x in enumerate(X):
        for t in route(tree, x):
            members[t].append(i)
    return members


def class_counts(tree, X, y, weights, n_classes):
    members = node_members(tree, X)
    out = np.zeros((tree.n_nodes, n_classes))
    for t, rows in enumerate(members):
        for i in rows:
            out[t, y[i]] += weights[i]
    return out


def variance_mdi(tree, X, y):
    """Per-feature inbag decrease of p(1-p) weighted by node size, over |D_T|."""
    w = tree.inbag_multiplicity.astype(float)
    counts = class_counts(tree, X, y, w, 2)
    n = counts.sum(axis=1)
    q = np.divide(counts[:, 1], n, out=np.zeros_like(n), where=n > 0)
    v = q * (1 - q)
    out = np.zeros(X.shape[1])
    for t in range(tree.n_nodes):
        f = tree.feature[t]
        if f < 0:
            continue
        lo, hi = tree.left[t], tree.right[t]
        out[f] += n[t] * v[t] - n[lo] * v[lo] - n[hi] * v[hi]
    return out / w.sum()


def mdi_oob_direct(tree, X, y, p):
    """Sum over OOB rows of squared deviations from inbag node means, per node."""
    oob = np.flatnonzero(tree.inbag_multiplicity == 0)
    w = tree.inbag_multiplicity.astype(float)
    counts = class_counts(tree, X, y, w, 2)
    mu = counts[:, 1] / counts.sum(axis=1)
    n_in = counts.sum(axis=1)
    sq = np.zeros(tree.n_nodes)
    cnt = np.zeros(tree.n_nodes)
    for i in oob:
        for t in route(tree, X[i]):
            sq[t] += (y[i] - mu[t]) ** 2
            cnt[t] += 1
    out = np.zeros(p)
    for t in range(tree.n_nodes):
        f = tree.feature[t]
        lo, hi = tree.left[t], tree.right[t]
        if f < 0 or min(cnt[t], cnt[lo], cnt[hi]) == 0:
            continue
        var = lambda s: sq[s] / cnt[s]  # noqa: E731
        out[f] += n_in[t] * var(t) - n_in[lo] * var(lo) - n_in[hi] * var(hi)
    return out / w.sum()


def auc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties count 1/2."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))
