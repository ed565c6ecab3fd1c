"""Local attributions for forests: decision-path contributions and TreeSHAP.

Both explain the class-1 probability of a tree. The node values and the
marginalization weights come from a cover source: the inbag sample (the
usual choice) or the tree's out-of-bag sample. An OOB-empty node takes the
OOB proportion of its nearest non-empty ancestor and carries zero weight.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from math import factorial
from typing import Optional

import numpy as np

from . import _kernels
from .data import Dataset
from .forest import Forest, Tree
from .importance import ImportanceReport

MAX_BRUTE_FORCE_FEATURES = 15


class Cover(str, Enum):
    INBAG = "inbag"
    OOB = "oob"


def node_values(tree: Tree, cover=Cover.INBAG, target: int = 1) -> np.ndarray:
    """Per-node proportion of class ``target`` under the cover source."""
    cover = Cover(cover)
    mu_in = tree.proportions("inbag")[:, target]
    if cover is Cover.INBAG:
        return mu_in
    mu = tree.proportions("oob")[:, target]
    if np.isnan(mu[0]):
        mu[0] = mu_in[0]
    for t in range(tree.n_nodes):  # parents precede children
        if tree.feature[t] >= 0:
            for c in (tree.left[t], tree.right[t]):
                if np.isnan(mu[c]):
                    mu[c] = mu[t]
    return mu


def node_cover(tree: Tree, cover=Cover.INBAG) -> np.ndarray:
    return tree.n_in if Cover(cover) is Cover.INBAG else tree.n_oob


@dataclass
class AttributionMatrix:
    """Per-sample, per-feature attributions of a forest's class-1 probability.

    ``values`` are averaged over the trees selected by ``aggregate`` ("all",
    or only the trees where a sample is "oob" / "inbag"); ``base_value`` is
    the matching per-sample average of the trees' expected outputs.
    ``membership`` holds the (n_trees, n) bootstrap multiplicities when the
    explained rows are the training rows.
    """

    values: np.ndarray
    base_value: np.ndarray
    kind: str
    cover: str
    aggregate: str = "all"
    per_tree: Optional[np.ndarray] = None  # (n_trees, n, p)
    tree_base: Optional[np.ndarray] = None  # (n_trees,)
    membership: Optional[np.ndarray] = None
    sample_ids: Optional[np.ndarray] = None
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        n, p = self.values.shape
        if self.sample_ids is None:
            self.sample_ids = np.arange(n)
        if self.feature_names is None:
            self.feature_names = tuple(f"x{j}" for j in range(p))

    def prediction(self) -> np.ndarray:
        return self.base_value + self.values.sum(axis=1)

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "feature", "value", "membership"])
        for i, sid in enumerate(self.sample_ids):
            for k, name in enumerate(self.feature_names):
                w.writerow([int(sid), name, repr(float(self.values[i, k])), self.aggregate])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "cover": self.cover,
            "aggregate": self.aggregate,
            "features": list(self.feature_names),
            "sample_ids": [int(s) for s in self.sample_ids],
            "base_value": self.base_value.tolist(),
            "values": self.values.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def cfc_tree(tree: Tree, x, cover=Cover.INBAG, p: Optional[int] = None) -> np.ndarray:
    """Conditional feature contributions of one row along its decision path."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    p = x.shape[1] if p is None else p
    return _kernels.cfc_rows(tree.feature, tree.threshold, tree.left, tree.right,
                             node_values(tree, cover), x, p)[0]


def _expected_value(tree: Tree, value: np.ndarray, weight: np.ndarray) -> float:
    """Cover-weighted mean of the leaf values."""
    ev = value.copy()
    for t in range(tree.n_nodes - 1, -1, -1):  # children before parents
        if tree.feature[t] >= 0:
            lo, hi = tree.left[t], tree.right[t]
            if weight[t] > 0:
                ev[t] = (weight[lo] * ev[lo] + weight[hi] * ev[hi]) / weight[t]
            else:
                ev[t] = 0.5 * (ev[lo] + ev[hi])
    return float(ev[0])


def _aggregate(forest: Forest, X, per_tree, tree_base, aggregate, kind, cover,
               sample_ids=None, feature_names=None) -> AttributionMatrix:
    n = X.shape[0]
    # rows are taken to be the training rows when the counts agree
    n_train = forest.trees[0].inbag_multiplicity.size
    membership = forest.inbag_matrix() if n == n_train else None
    if aggregate == "all":
        values = per_tree.mean(axis=0)
        base = np.full(n, tree_base.mean())
    else:
        if membership is None:
            raise ValueError("restricted aggregation needs the training rows")
        mask = (membership == 0) if aggregate == "oob" else (membership > 0)
        counts = mask.sum(axis=0)
        if np.any(counts == 0):
            raise ValueError(f"{np.count_nonzero(counts == 0)} sample(s) are {aggregate} in no tree")
        values = np.einsum("tn,tnp->np", mask, per_tree) / counts[:, None]
        base = mask.T.astype(np.float64) @ tree_base / counts
    return AttributionMatrix(values, base, kind, Cover(cover).value, aggregate, per_tree,
                             tree_base, membership, sample_ids, feature_names)


def cfc_forest(forest: Forest, X, cover=Cover.INBAG, aggregate: str = "all",
               sample_ids=None, feature_names=None) -> AttributionMatrix:
    """Tree-averaged conditional feature contributions for the rows of ``X``."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    per_tree = np.empty((forest.n_trees, X.shape[0], forest.p))
    tree_base = np.empty(forest.n_trees)
    for b, tree in enumerate(forest.trees):
        val = node_values(tree, cover)
        per_tree[b] = _kernels.cfc_rows(tree.feature, tree.threshold, tree.left, tree.right,
                                        val, X, forest.p)
        tree_base[b] = val[0]
    return _aggregate(forest, X, per_tree, tree_base, aggregate, "cfc", cover,
                      sample_ids, feature_names)


def cover_prediction(forest: Forest, X, cover=Cover.INBAG) -> np.ndarray:
    """Mean over trees of the cover-source class-1 value of the reached leaf."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    out = np.zeros(X.shape[0])
    for tree in forest.trees:
        out += node_values(tree, cover)[tree.apply(X)]
    return out / forest.n_trees


def global_cfc(attr: AttributionMatrix) -> ImportanceReport:
    """Sum over samples of the absolute tree-averaged contributions."""
    if attr.kind != "cfc":
        raise ValueError("global_cfc expects conditional feature contributions")
    return ImportanceReport("cfc", np.abs(attr.values).sum(axis=0),
                            {"cover": attr.cover, "aggregate": attr.aggregate},
                            feature_names=attr.feature_names)


def mdi_via_cfc(tree: Tree, dataset: Dataset, subset: str = "inbag",
                restricted: bool = False) -> np.ndarray:
    """Per-feature mean of contribution * label over the tree's inbag or OOB rows.

    Contributions use inbag node means; inbag rows count with multiplicity.
    With ``restricted`` the contributions are instead averaged over the rows
    with label 1 only.
    """
    dataset.require_binary()
    if subset not in ("inbag", "oob"):
        raise ValueError("subset must be 'inbag' or 'oob'")
    mult = tree.inbag_multiplicity
    w = mult.astype(np.float64) if subset == "inbag" else (mult == 0).astype(np.float64)
    y = dataset.labels.astype(np.float64)
    if restricted:
        w = w * y
    if w.sum() == 0:
        raise ValueError(f"empty {subset} subset")
    f = _kernels.cfc_rows(tree.feature, tree.threshold, tree.left, tree.right,
                          node_values(tree, Cover.INBAG), dataset.features, dataset.p)
    return (w * y) @ f / w.sum()


def tree_shap(tree: Tree, x, cover=Cover.INBAG, p: Optional[int] = None) -> np.ndarray:
    """Path-dependent TreeSHAP values of one row."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    p = x.shape[1] if p is None else p
    return _kernels.tree_shap_rows(tree.feature, tree.threshold, tree.left, tree.right,
                                   node_values(tree, cover), node_cover(tree, cover).astype(np.float64),
                                   x, p, tree.max_depth_reached)[0]


def shap_expected_value(tree: Tree, cover=Cover.INBAG) -> float:
    return _expected_value(tree, node_values(tree, cover), node_cover(tree, cover))


def _subset_value(tree: Tree, x, value, weight, mask: int) -> float:
    """Expected output when features in ``mask`` are fixed to x."""
    def visit(t):
        f = tree.feature[t]
        if f < 0:
            return value[t]
        lo, hi = tree.left[t], tree.right[t]
        if mask >> f & 1:
            return visit(lo if x[f] <= tree.threshold[t] else hi)
        if weight[t] > 0:
            return (weight[lo] * visit(lo) + weight[hi] * visit(hi)) / weight[t]
        return 0.5 * (visit(lo) + visit(hi))
    return visit(0)


def brute_force_shap(tree: Tree, x, cover=Cover.INBAG) -> np.ndarray:
    """Shapley values by enumerating every feature subset (test oracle)."""
    x = np.asarray(x, dtype=np.float64)
    p = x.shape[0]
    if p > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"brute force Shapley values limited to {MAX_BRUTE_FORCE_FEATURES} features")
    value = node_values(tree, cover)
    weight = node_cover(tree, cover)
    v = {}
    for size in range(p + 1):
        for S in combinations(range(p), size):
            mask = sum(1 << j for j in S)
            v[mask] = _subset_value(tree, x, value, weight, mask)
    phi = np.zeros(p)
    for k in range(p):
        others = [j for j in range(p) if j != k]
        for size in range(p):
            coef = factorial(size) * factorial(p - size - 1) / factorial(p)
            for S in combinations(others, size):
                mask = sum(1 << j for j in S)
                phi[k] += coef * (v[mask | 1 << k] - v[mask])
    return phi


def shap_forest(forest: Forest, X, cover=Cover.INBAG, aggregate: str = "all",
                sample_ids=None, feature_names=None) -> AttributionMatrix:
    """TreeSHAP values for the rows of ``X``, kept per tree."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    per_tree = np.empty((forest.n_trees, X.shape[0], forest.p))
    tree_base = np.empty(forest.n_trees)
    for b, tree in enumerate(forest.trees):
        val = node_values(tree, cover)
        w = node_cover(tree, cover).astype(np.float64)
        per_tree[b] = _kernels.tree_shap_rows(tree.feature, tree.threshold, tree.left,
                                              tree.right, val, w, X, forest.p,
                                              tree.max_depth_reached)
        tree_base[b] = _expected_value(tree, val, w)
    return _aggregate(forest, X, per_tree, tree_base, aggregate, "shap", cover,
                      sample_ids, feature_names)


def split_importance(attr: AttributionMatrix, labels=None, split: str = "all",
                     weighted: bool = True, normalize: bool = False,
                     method: Optional[str] = None) -> ImportanceReport:
    """Global score from local attributions, optionally weighted by the labels.

    For ``split`` "inbag"/"oob" every sample is first averaged over the
    trees in which it is inbag/OOB. Weighted: |mean_i phi_i * y_i|;
    unweighted: mean_i |phi_i|.
    """
    if split == "all":
        phi = attr.values
        keep = np.ones(phi.shape[0], dtype=bool)
    else:
        if attr.membership is None or attr.per_tree is None:
            raise ValueError("inbag/oob splits need per-tree values on the training rows")
        mask = (attr.membership == 0) if split == "oob" else (attr.membership > 0)
        counts = mask.sum(axis=0)
        keep = counts > 0
        with np.errstate(invalid="ignore"):
            phi = np.einsum("tn,tnp->np", mask, attr.per_tree) / counts[:, None]
    if not np.any(keep):
        raise ValueError(f"no samples in split {split!r}")
    phi = phi[keep]
    if weighted:
        if labels is None:
            raise ValueError("labels are required for weighting")
        y = np.asarray(labels, dtype=np.float64)[keep]
        scores = np.abs((phi * y[:, None]).mean(axis=0))
    else:
        scores = np.abs(phi).mean(axis=0)
    if normalize and scores.max() > 0:
        scores = scores / scores.max()
    if method is None:
        method = f"{attr.kind}_{split}" + ("_w" if weighted else "")
    return ImportanceReport(method, scores, {"split": split, "weighted": weighted,
                                             "cover": attr.cover, "normalize": normalize},
                            feature_names=attr.feature_names)


def weighted_shap(attr: AttributionMatrix, labels, split: str = "all",
                  normalize: bool = False) -> ImportanceReport:
    """|mean of SHAP * y| per feature over the selected samples."""
    if attr.kind != "shap":
        raise ValueError("weighted_shap expects SHAP attributions")
    return split_importance(attr, labels, split, weighted=True, normalize=normalize)
