"""Compiled inner loops shared by the forest, importance and explain modules.

Trees are passed around as flat arrays: ``feature`` (-1 on leaves),
``threshold``, ``left`` and ``right`` (-1 on leaves). A sample goes left when
``x[feature] <= threshold``.
"""

import numpy as np
from numba import njit

# minimum margin for one split to beat another; keeps tie-breaking stable
TIE_EPS = 1e-12


@njit(cache=True, nogil=True)
def best_split(X, y, w, idx, feats, min_leaf, n_classes):
    """Exhaustive Gini split search over ``feats`` for the samples ``idx``.

    ``w`` holds per-sample multiplicities. Returns (feature, threshold,
    decrease); feature is -1 when no admissible split has positive decrease.
    """
    m = idx.shape[0]
    parent = np.zeros(n_classes)
    total = 0.0
    for a in range(m):
        i = idx[a]
        parent[y[i]] += w[i]
        total += w[i]
    sq = 0.0
    for d in range(n_classes):
        sq += parent[d] * parent[d]
    base = sq / (total * total)

    best_f = -1
    best_thr = 0.0
    best_dec = TIE_EPS
    left = np.empty(n_classes)
    vals = np.empty(m)
    for fi in range(feats.shape[0]):
        f = feats[fi]
        for a in range(m):
            vals[a] = X[idx[a], f]
        order = np.argsort(vals, kind="mergesort")
        left[:] = 0.0
        nl = 0.0
        for a in range(m - 1):
            i = idx[order[a]]
            left[y[i]] += w[i]
            nl += w[i]
            v0 = vals[order[a]]
            v1 = vals[order[a + 1]]
            if v1 <= v0:
                continue
            nr = total - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl = 0.0
            sr = 0.0
            for d in range(n_classes):
                r = parent[d] - left[d]
                sl += left[d] * left[d]
                sr += r * r
            dec = sl / (nl * total) + sr / (nr * total) - base
            if dec > best_dec + TIE_EPS or (best_f == -1 and dec > best_dec):
                thr = 0.5 * (v0 + v1)
                if thr >= v1:
                    thr = v0
                best_f = f
                best_thr = thr
                best_dec = dec
    if best_f == -1:
        return -1, 0.0, 0.0
    return best_f, best_thr, best_dec


@njit(cache=True, nogil=True)
def apply(feature, threshold, left, right, X):
    """Leaf index reached by every row of ``X``."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def route_counts(feature, threshold, left, right, X, y, w, counts):
    """Add ``w[i]`` to ``counts[node, y[i]]`` for every node on row i's path."""
    for i in range(X.shape[0]):
        wi = w[i]
        if wi == 0:
            continue
        node = 0
        while True:
            counts[node, y[i]] += wi
            if feature[node] < 0:
                break
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]


@njit(cache=True, nogil=True)
def route_sq_dev(feature, threshold, left, right, X, y, mu, sums):
    """Add ``(y[i] - mu[node])**2`` to ``sums[node]`` along each row's path."""
    for i in range(X.shape[0]):
        node = 0
        while True:
            r = y[i] - mu[node]
            sums[node] += r * r
            if feature[node] < 0:
                break
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]


@njit(cache=True, nogil=True)
def cfc_rows(feature, threshold, left, right, value, X, p):
    """Decision-path contributions: child value minus parent value per split."""
    n = X.shape[0]
    out = np.zeros((n, p))
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            f = feature[node]
            if X[i, f] <= threshold[node]:
                child = left[node]
            else:
                child = right[node]
            out[i, f] += value[child] - value[node]
            node = child
    return out


# ---------------------------------------------------------------------------
# Path-dependent TreeSHAP
#
# The unique-path bookkeeping tracks, for every feature on the current root to
# node path, the fraction of cover that flows down when the feature is absent
# (zero fraction) or present (one fraction), together with the permutation
# weights of all subset sizes. Each node owns a path segment starting right
# after its parent's; traversal is depth-first with an explicit stack, so a
# segment is only overwritten after the subtree that used it is finished.

@njit(cache=True, nogil=True, inline="always")
def _extend(pf, pz, po, pw, off, depth, zero, one, feat, inv):
    pf[off + depth] = feat
    pz[off + depth] = zero
    po[off + depth] = one
    pw[off + depth] = 1.0 if depth == 0 else 0.0
    r = inv[depth + 1]
    for i in range(depth - 1, -1, -1):
        pw[off + i + 1] += one * pw[off + i] * (i + 1) * r
        pw[off + i] = zero * pw[off + i] * (depth - i) * r


@njit(cache=True, nogil=True, inline="always")
def _unwind(pf, pz, po, pw, off, depth, k):
    one = po[off + k]
    zero = pz[off + k]
    nxt = pw[off + depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[off + i]
            pw[off + i] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - pw[off + i] * zero * (depth - i) / (depth + 1)
        else:
            pw[off + i] = pw[off + i] * (depth + 1) / (zero * (depth - i))
    for i in range(k, depth):
        pf[off + i] = pf[off + i + 1]
        pz[off + i] = pz[off + i + 1]
        po[off + i] = po[off + i + 1]


@njit(cache=True, nogil=True, inline="always")
def _unwound_sum(pz, po, pw, off, depth, k, inv):
    one = po[off + k]
    zero = pz[off + k]
    total = 0.0
    if one != 0.0:
        a = (depth + 1) / one
        b = zero * inv[depth + 1]
        nxt = pw[off + depth]
        for i in range(depth - 1, -1, -1):
            tmp = nxt * a * inv[i + 1]
            total += tmp
            nxt = pw[off + i] - tmp * b * (depth - i)
    elif zero != 0.0:
        for i in range(depth - 1, -1, -1):
            total += pw[off + i] * inv[depth - i]
        total *= (depth + 1) / zero
    return total


@njit(cache=True, nogil=True)
def _shap_one(feature, threshold, left, right, value, cover, x, phi,
              pf, pz, po, pw, inv, st_node, st_off, st_depth, st_zero, st_one, st_feat):
    top = 0
    st_node[0] = 0
    st_off[0] = 0
    st_depth[0] = 0
    st_zero[0] = 1.0
    st_one[0] = 1.0
    st_feat[0] = -1
    while top >= 0:
        node = st_node[top]
        parent_off = st_off[top]
        depth = st_depth[top]
        zero = st_zero[top]
        one = st_one[top]
        feat = st_feat[top]
        top -= 1

        off = parent_off + depth + 1
        for i in range(depth):
            pf[off + i] = pf[parent_off + i]
            pz[off + i] = pz[parent_off + i]
            po[off + i] = po[parent_off + i]
            pw[off + i] = pw[parent_off + i]
        _extend(pf, pz, po, pw, off, depth, zero, one, feat, inv)

        f = feature[node]
        if f < 0:
            v = value[node]
            for i in range(1, depth + 1):
                s = _unwound_sum(pz, po, pw, off, depth, i, inv)
                phi[pf[off + i]] += s * (po[off + i] - pz[off + i]) * v
            continue

        if x[f] <= threshold[node]:
            hot = left[node]
            cold = right[node]
        else:
            hot = right[node]
            cold = left[node]
        c = cover[node]
        if c > 0:
            hot_zero = cover[hot] / c
            cold_zero = cover[cold] / c
        else:
            hot_zero = 0.5
            cold_zero = 0.5
        inc_zero = 1.0
        inc_one = 1.0
        k = 1
        while k <= depth:
            if pf[off + k] == f:
                break
            k += 1
        if k <= depth:
            inc_zero = pz[off + k]
            inc_one = po[off + k]
            _unwind(pf, pz, po, pw, off, depth, k)
            depth -= 1
        # a branch with both fractions zero adds nothing and cannot be unwound
        if cold_zero * inc_zero > 0.0:
            top += 1
            st_node[top] = cold
            st_off[top] = off
            st_depth[top] = depth + 1
            st_zero[top] = cold_zero * inc_zero
            st_one[top] = 0.0
            st_feat[top] = f
        if hot_zero * inc_zero > 0.0 or inc_one > 0.0:
            top += 1
            st_node[top] = hot
            st_off[top] = off
            st_depth[top] = depth + 1
            st_zero[top] = hot_zero * inc_zero
            st_one[top] = inc_one
            st_feat[top] = f


@njit(cache=True, nogil=True)
def tree_shap_rows(feature, threshold, left, right, value, cover, X, p, max_depth):
    """Exact path-dependent Shapley values of every row of ``X``."""
    n = X.shape[0]
    out = np.zeros((n, p))
    size = (max_depth + 2) * (max_depth + 3)
    pf = np.empty(size, dtype=np.int64)
    pz = np.empty(size)
    po = np.empty(size)
    pw = np.empty(size)
    inv = np.zeros(max_depth + 3)
    for j in range(1, max_depth + 3):
        inv[j] = 1.0 / j
    m = 2 * (max_depth + 2)
    st_node = np.empty(m, dtype=np.int64)
    st_off = np.empty(m, dtype=np.int64)
    st_depth = np.empty(m, dtype=np.int64)
    st_zero = np.empty(m)
    st_one = np.empty(m)
    st_feat = np.empty(m, dtype=np.int64)
    for i in range(n):
        _shap_one(feature, threshold, left, right, value, cover, X[i], out[i],
                  pf, pz, po, pw, inv, st_node, st_off, st_depth, st_zero, st_one, st_feat)
    return out
