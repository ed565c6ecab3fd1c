"""Global feature importance over a fitted forest.

All impurity-based scores share one recipe: for every internal node t split
on feature k, add

    N(t)/|D_T| * [PG(t) - N(left)/N(t) PG(left) - N(right)/N(t) PG(right)]

to feature k, where N counts inbag samples with multiplicity and |D_T| is
the bootstrap size. Scores are averaged over trees and left unnormalized.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .data import Dataset
from .forest import Forest, NodeStats, Tree

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PGConfig:
    """Penalized Gini impurity

        alpha * c * G_oob + (1 - alpha) * G_in + lam * 1/2 sum_d (p_oob,d - p_in,d)^2

    with c = n_oob / (n_oob - 1) when ``bias_correct`` and 1 otherwise. For two
    classes the penalty is lam * (p_oob - p_in)^2 on the class-1 proportion.
    ``min_oob`` defaults to 1 (2 with the correction).
    """

    alpha: float
    lam: float
    bias_correct: bool = False
    min_oob: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.min_oob is None:
            object.__setattr__(self, "min_oob", 2 if self.bias_correct else 1)
        if self.bias_correct and self.min_oob < 2:
            raise ValueError("bias correction needs min_oob >= 2")
        if self.min_oob < 1 and self.uses_oob:
            raise ValueError("min_oob must be >= 1 when OOB statistics are used")

    @property
    def uses_oob(self) -> bool:
        return self.alpha > 0 or self.lam > 0

    @property
    def name(self) -> str:
        base = f"pg:{self.alpha:g}:{self.lam:g}"
        return base + ":corrected" if self.bias_correct else base


@dataclass
class ImportanceReport:
    method: str
    scores: np.ndarray
    config: dict = field(default_factory=dict)
    per_tree: Optional[np.ndarray] = None  # (p, n_trees)
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.feature_names is None:
            self.feature_names = tuple(f"x{j}" for j in range(self.scores.size))

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "method", "score"])
        for name, s in zip(self.feature_names, self.scores):
            w.writerow([name, self.method, repr(float(s))])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config,
            "features": list(self.feature_names),
            "scores": self.scores.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def ranking(self) -> np.ndarray:
        """Feature indices from most to least important (stable on ties)."""
        return np.argsort(-self.scores, kind="stable")


def _node_pg(p_in, p_oob, n_oob, cfg: PGConfig) -> np.ndarray:
    """Penalized impurity for stacked nodes; rows of ``p_*`` are class vectors."""
    out = (1.0 - cfg.alpha) * np.sum(p_in * (1.0 - p_in), axis=-1)
    if cfg.alpha > 0:
        g_oob = np.sum(p_oob * (1.0 - p_oob), axis=-1)
        if cfg.bias_correct:
            with np.errstate(divide="ignore", invalid="ignore"):
                g_oob = g_oob * n_oob / (n_oob - 1.0)
        out = out + cfg.alpha * g_oob
    if cfg.lam > 0:
        out = out + cfg.lam * 0.5 * np.sum((p_oob - p_in) ** 2, axis=-1)
    return out


def penalized_impurity(stats: NodeStats, config: PGConfig) -> float:
    """Penalized Gini impurity of one node."""
    n_oob = stats.n_oob
    if config.uses_oob and n_oob < config.min_oob:
        raise ValueError(f"node has {n_oob:g} OOB samples, need {config.min_oob}")
    p_oob = stats.mu_oob if n_oob > 0 else np.full_like(stats.mu_in, np.nan)
    return float(_node_pg(stats.mu_in, p_oob, n_oob, config))


def _tree_decrease(tree: Tree, node_impurity: np.ndarray, valid: np.ndarray, p: int):
    """Per-feature sum of weighted impurity decreases of one tree."""
    t = tree.internal
    lo, hi = tree.left[t], tree.right[t]
    n_in = tree.n_in
    ok = valid[t] & valid[lo] & valid[hi]
    dec = n_in[t] * node_impurity[t] - n_in[lo] * node_impurity[lo] - n_in[hi] * node_impurity[hi]
    dec = np.where(ok, dec, 0.0) / tree.inbag_size
    return np.bincount(tree.feature[t], weights=dec, minlength=p), int(np.count_nonzero(~ok))


def _report(method, per_tree, config, feature_names=None):
    per_tree = np.asarray(per_tree).T
    return ImportanceReport(method, per_tree.mean(axis=1), config, per_tree, feature_names)


def pg_importance(forest: Forest, config: PGConfig, oob_source: str = "oob",
                  feature_names=None) -> ImportanceReport:
    """Impurity decrease under the penalized Gini impurity.

    ``oob_source="inbag"`` substitutes the inbag statistics for the OOB ones,
    which turns every member of the family into plain MDI up to scale.
    Nodes where the node or a child has fewer than ``min_oob`` OOB samples
    contribute nothing.
    """
    if oob_source not in ("oob", "inbag"):
        raise ValueError("oob_source must be 'oob' or 'inbag'")
    rows, skipped = [], 0
    for tree in forest.trees:
        p_in = tree.proportions("inbag")
        if oob_source == "inbag":
            p_oob, n_oob = p_in, tree.n_in
        else:
            p_oob, n_oob = tree.proportions("oob"), tree.n_oob
        imp = _node_pg(p_in, p_oob, n_oob, config)
        valid = n_oob >= config.min_oob if config.uses_oob else np.ones(tree.n_nodes, bool)
        row, s = _tree_decrease(tree, imp, valid, forest.p)
        rows.append(row)
        skipped += s
    if skipped:
        log.debug("%s: %d internal nodes skipped for lack of OOB samples", config.name, skipped)
    cfg = asdict(config)
    cfg["oob_source"] = oob_source
    return _report(config.name, rows, cfg, feature_names)


def mdi(forest: Forest, feature_names=None) -> ImportanceReport:
    """Mean decrease in Gini impurity on the inbag samples."""
    rep = pg_importance(forest, PGConfig(0.0, 0.0, min_oob=0), feature_names=feature_names)
    rep.method = "mdi"
    return rep


def mdi_oob(forest: Forest, dataset: Dataset) -> ImportanceReport:
    """Variance reduction of OOB labels measured around the inbag node means.

    Node "variance" is the mean of (y_oob - mu_in(t))^2 over the node's OOB
    samples, with y the 0/1 class label. Nodes where the node or a child has
    no OOB sample contribute nothing.
    """
    dataset.require_binary()
    X = dataset.features
    y = dataset.labels.astype(np.float64)
    rows = []
    for tree in forest.trees:
        oob = tree.oob_indices
        mu = tree.proportions("inbag")[:, 1]
        sums = np.zeros(tree.n_nodes)
        _kernels.route_sq_dev(tree.feature, tree.threshold, tree.left, tree.right,
                              X[oob], y[oob], mu, sums)
        n_oob = tree.n_oob
        with np.errstate(invalid="ignore", divide="ignore"):
            msd = np.where(n_oob > 0, sums / np.where(n_oob > 0, n_oob, 1), np.nan)
        row, _ = _tree_decrease(tree, msd, n_oob >= 1, forest.p)
        rows.append(row)
    return _report("mdi_oob", rows, {}, dataset.column_names)


def tree_predict_class(tree: Tree, X) -> np.ndarray:
    return np.argmax(tree.proportions("inbag")[tree.apply(X)], axis=1)


def mda_permutation(forest: Forest, dataset: Dataset, n_permutations: int = 1,
                    rng: Optional[np.random.Generator] = None) -> ImportanceReport:
    """OOB permutation importance (mean decrease in accuracy).

    For each tree, the accuracy on its OOB rows minus the accuracy after
    shuffling one column among those rows. Trees without OOB rows are left
    out of the average.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    X, y = dataset.features, dataset.labels
    per_tree = np.full((forest.n_trees, forest.p), np.nan)
    for b, tree in enumerate(forest.trees):
        oob = tree.oob_indices
        if oob.size == 0:
            continue
        Xo, yo = X[oob], y[oob]
        base = np.mean(tree_predict_class(tree, Xo) == yo)
        used = set(tree.feature[tree.internal].tolist())
        for k in range(forest.p):
            drops = np.empty(n_permutations)
            for r in range(n_permutations):
                perm = rng.permutation(oob.size)
                if k not in used:
                    drops[r] = 0.0
                    continue
                Xp = Xo.copy()
                Xp[:, k] = Xo[perm, k]
                drops[r] = base - np.mean(tree_predict_class(tree, Xp) == yo)
            per_tree[b, k] = drops.mean()
    per_tree = per_tree.T
    scores = np.nanmean(per_tree, axis=1) if np.any(~np.isnan(per_tree)) else np.zeros(forest.p)
    return ImportanceReport("mda", scores, {"n_permutations": n_permutations}, per_tree,
                            dataset.column_names)
