"""Bootstrap random forests of CART classification trees.

Every tree keeps two sets of node statistics: class counts of its inbag
(bootstrap) sample, counted with multiplicity, and class counts of its
out-of-bag samples. Only the inbag sample shapes the tree; the out-of-bag
rows are routed through the finished tree afterwards.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .data import Dataset

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    mtry: Optional[int] = None  # None: floor(sqrt(p))
    min_leaf: int = 1
    max_depth: Optional[int] = None
    seed: int = 0
    sample_fraction: Optional[float] = None  # None: bootstrap with replacement

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.sample_fraction is not None and not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")

    def resolve_mtry(self, p: int) -> int:
        m = max(1, int(np.floor(np.sqrt(p)))) if self.mtry is None else self.mtry
        if m > p:
            raise ValueError(f"mtry={m} exceeds the number of features {p}")
        return m


@dataclass(frozen=True)
class SplitRecord:
    feature: int
    threshold: float
    left: int
    right: int
    decrease: float = 0.0


@dataclass(frozen=True)
class NodeStats:
    """Inbag and out-of-bag class counts of one node."""

    class_counts_in: np.ndarray
    class_counts_oob: np.ndarray

    @property
    def n_in(self) -> float:
        return float(self.class_counts_in.sum())

    @property
    def n_oob(self) -> float:
        return float(self.class_counts_oob.sum())

    @property
    def mu_in(self) -> np.ndarray:
        return self.class_counts_in / self.n_in

    @property
    def mu_oob(self) -> Optional[np.ndarray]:
        n = self.n_oob
        return None if n == 0 else self.class_counts_oob / n


class Tree:
    """A fitted tree stored as parallel node arrays (root is node 0)."""

    def __init__(self, feature, threshold, left, right, counts_in, counts_oob,
                 inbag_multiplicity, decrease=None):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.counts_in = np.asarray(counts_in, dtype=np.float64)
        self.counts_oob = np.asarray(counts_oob, dtype=np.float64)
        self.inbag_multiplicity = np.asarray(inbag_multiplicity, dtype=np.int64)
        n_nodes = self.feature.shape[0]
        self.decrease = np.zeros(n_nodes) if decrease is None else np.asarray(decrease, dtype=np.float64)
        for a in (self.feature, self.threshold, self.left, self.right, self.counts_in,
                  self.counts_oob, self.inbag_multiplicity, self.decrease):
            a.setflags(write=False)
        self.depth = self._node_depths()
        self.max_depth_reached = int(self.depth.max())

    def _node_depths(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for t in range(self.n_nodes):  # children always have larger ids
            if self.feature[t] >= 0:
                depth[self.left[t]] = depth[self.right[t]] = depth[t] + 1
        return depth

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_classes(self) -> int:
        return self.counts_in.shape[1]

    @property
    def n_in(self) -> np.ndarray:
        return self.counts_in.sum(axis=1)

    @property
    def n_oob(self) -> np.ndarray:
        return self.counts_oob.sum(axis=1)

    @property
    def internal(self) -> np.ndarray:
        return np.flatnonzero(self.feature >= 0)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def oob_indices(self) -> np.ndarray:
        return np.flatnonzero(self.inbag_multiplicity == 0)

    @property
    def inbag_size(self) -> float:
        return float(self.inbag_multiplicity.sum())

    def stats(self, node: int) -> NodeStats:
        return NodeStats(self.counts_in[node], self.counts_oob[node])

    def split(self, node: int) -> Optional[SplitRecord]:
        if self.feature[node] < 0:
            return None
        return SplitRecord(int(self.feature[node]), float(self.threshold[node]),
                           int(self.left[node]), int(self.right[node]),
                           float(self.decrease[node]))

    def apply(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _kernels.apply(self.feature, self.threshold, self.left, self.right, X)

    def proportions(self, source: str = "inbag") -> np.ndarray:
        """Class proportions per node; NaN rows where the source is empty."""
        counts = self.counts_in if source == "inbag" else self.counts_oob
        n = counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, counts / np.where(n > 0, n, 1), np.nan)

    def predict_proba(self, X) -> np.ndarray:
        return self.proportions("inbag")[self.apply(X)]

    def to_dict(self) -> dict:
        nodes = []
        for t in range(self.n_nodes):
            leaf = self.feature[t] < 0
            nodes.append({
                "id": t,
                "feature": None if leaf else int(self.feature[t]),
                "threshold": None if leaf else float(self.threshold[t]),
                "children": [] if leaf else [int(self.left[t]), int(self.right[t])],
                "n_in": float(self.counts_in[t].sum()),
                "n_oob": float(self.counts_oob[t].sum()),
                "class_counts_in": self.counts_in[t].tolist(),
                "class_counts_oob": self.counts_oob[t].tolist(),
                "decrease": float(self.decrease[t]),
            })
        return {"nodes": nodes, "inbag_multiplicity": self.inbag_multiplicity.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        nodes = sorted(d["nodes"], key=lambda r: r["id"])
        feature = [-1 if r["feature"] is None else r["feature"] for r in nodes]
        threshold = [0.0 if r["threshold"] is None else r["threshold"] for r in nodes]
        left = [r["children"][0] if r["children"] else -1 for r in nodes]
        right = [r["children"][1] if r["children"] else -1 for r in nodes]
        return cls(feature, threshold, left, right,
                   [r["class_counts_in"] for r in nodes],
                   [r["class_counts_oob"] for r in nodes],
                   d["inbag_multiplicity"],
                   [r.get("decrease", 0.0) for r in nodes])


@dataclass(frozen=True)
class Forest:
    trees: tuple
    params: ForestParams
    n_classes: int
    p: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            out += tree.predict_proba(X)
        return out / self.n_trees

    def inbag_matrix(self) -> np.ndarray:
        """(n_trees, n) bootstrap multiplicities; 0 marks out-of-bag."""
        return np.stack([t.inbag_multiplicity for t in self.trees])

    def to_json(self) -> str:
        return json.dumps({
            "version": SCHEMA_VERSION,
            "params": asdict(self.params),
            "n_classes": self.n_classes,
            "p": self.p,
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        d = json.loads(text)
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported forest schema version {d.get('version')!r}")
        trees = tuple(Tree.from_dict(t) for t in d["trees"])
        return cls(trees, ForestParams(**d["params"]), d["n_classes"], d["p"])


def bootstrap_sample(n: int, rng: np.random.Generator,
                     sample_fraction: Optional[float] = None) -> np.ndarray:
    """Per-sample inbag multiplicities of one bootstrap draw of size n.

    With ``sample_fraction`` set, draws ``ceil(fraction * n)`` rows without
    replacement instead.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if sample_fraction is None:
        return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.int64)
    k = max(1, int(np.ceil(sample_fraction * n)))
    mult = np.zeros(n, dtype=np.int64)
    mult[rng.choice(n, size=k, replace=False)] = 1
    return mult


def gini_node(class_counts) -> float:
    """Gini impurity sum_d p_d (1 - p_d) of a vector of class counts."""
    c = np.asarray(class_counts, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("class counts must be nonnegative")
    n = c.sum()
    if n <= 0:
        raise ValueError("gini impurity of an empty node is undefined")
    prop = c / n
    return float(np.sum(prop * (1.0 - prop)))


def best_split(X, y, node_samples, candidate_features, min_leaf: int = 1,
               n_classes: Optional[int] = None, weights=None) -> Optional[SplitRecord]:
    """Best inbag Gini split of ``node_samples`` over ``candidate_features``.

    Thresholds are midpoints between adjacent distinct values. Ties go to
    the lowest feature index, then the lowest threshold. Returns None when no
    split leaves ``min_leaf`` samples on both sides with positive decrease.
    Child ids in the returned record are left as -1.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    idx = np.asarray(node_samples, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    feats = np.sort(np.asarray(candidate_features, dtype=np.int64))
    if idx.size < 2:
        return None
    f, thr, dec = _kernels.best_split(X, y, w, idx, feats, float(min_leaf), n_classes)
    if f < 0:
        return None
    return SplitRecord(int(f), float(thr), -1, -1, float(dec))


def fit_tree(dataset: Dataset, params: ForestParams, rng: np.random.Generator) -> Tree:
    """Grow one tree on a bootstrap sample and fill its inbag/OOB node stats."""
    X, y = dataset.features, dataset.labels
    D = dataset.n_classes
    p = dataset.p
    mtry = params.resolve_mtry(p)
    mult = bootstrap_sample(dataset.n, rng, params.sample_fraction)
    w = mult.astype(np.float64)
    max_depth = np.inf if params.max_depth is None else params.max_depth

    feature, threshold, left, right, decrease = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        decrease.append(0.0)
        return len(feature) - 1

    # depth-first, left child first; ids increase from parent to child
    stack = [(new_node(), np.flatnonzero(mult), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], weights=w[idx], minlength=D)
        n_node = counts.sum()
        if depth >= max_depth or n_node < 2 * params.min_leaf or np.count_nonzero(counts) < 2:
            continue
        feats = np.sort(rng.choice(p, size=mtry, replace=False))
        f, thr, dec = _kernels.best_split(X, y, w, idx, feats, float(params.min_leaf), D)
        if f < 0:
            continue
        go_left = X[idx, f] <= thr
        lo, hi = new_node(), new_node()
        feature[node], threshold[node], decrease[node] = f, thr, dec
        left[node], right[node] = lo, hi
        stack.append((hi, idx[~go_left], depth + 1))
        stack.append((lo, idx[go_left], depth + 1))

    feature = np.array(feature, dtype=np.int64)
    threshold = np.array(threshold)
    left = np.array(left, dtype=np.int64)
    right = np.array(right, dtype=np.int64)
    counts_in = np.zeros((feature.size, D))
    counts_oob = np.zeros((feature.size, D))
    _kernels.route_counts(feature, threshold, left, right, X, y, w, counts_in)
    _kernels.route_counts(feature, threshold, left, right, X, y,
                          (mult == 0).astype(np.float64), counts_oob)
    return Tree(feature, threshold, left, right, counts_in, counts_oob, mult, decrease)


def tree_rngs(seed: int, n_trees: int) -> list:
    """Independent per-tree generators derived from (seed, tree index)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_trees)]


def fit_forest(dataset: Dataset, params: ForestParams, n_jobs: int = 1) -> Forest:
    params.resolve_mtry(dataset.p)
    rngs = tree_rngs(params.seed, params.n_trees)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            trees = tuple(pool.map(lambda r: fit_tree(dataset, params, r), rngs))
    else:
        trees = tuple(fit_tree(dataset, params, r) for r in rngs)
    return Forest(trees, params, dataset.n_classes, dataset.p)


def predict_proba(forest: Forest, x) -> np.ndarray:
    """Average of the trees' inbag leaf class proportions."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != forest.p:
        raise ValueError(f"expected {forest.p} features, got {x.shape[-1]}")
    out = forest.predict_proba(x)
    return out[0] if x.ndim == 1 else out
