"""Simulation studies and the Titanic case study.

Every study is driven by a master seed. Repetition r draws from the r-th
child of ``SeedSequence(seed)``, so results do not depend on how many
repetitions run or in what order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, load_titanic
from .explain import Cover, cfc_forest, mdi_via_cfc, shap_forest, split_importance
from .forest import ForestParams, fit_forest
from .scoring import compute_scores

NOISY_METHODS = (
    "pg:1:0:corrected", "pg:1:0", "pg:0.5:1:corrected", "pg:0.5:1",
    "shap", "shap_in", "shap_oob", "shap_w", "shap_in_w", "shap_oob_w",
    "mda", "mdi",
)
NULL_POWER_METHODS = ("mdi", "shap", "pg:0.5:1", "pg:0.5:1:corrected", "shap_w", "shap_oob_w")
TITANIC_METHODS = (
    "mdi", "mda", "cfc", "pg:0.5:1", "pg:0.5:1:corrected", "pg:1:2",
    "shap", "shap_in", "shap_oob", "shap_w", "shap_in_w", "shap_oob_w",
)
STROBL_ARITY = (None, 2, 4, 10, 20)
N_BOOT = 2000  # bootstrap resamples for the standard error of a median


@dataclass(frozen=True)
class StroblConfig:
    n: int = 120
    case: str = "null"
    reps: int = 50
    forest_params: ForestParams = ForestParams(n_trees=100, mtry=2, min_leaf=1)
    seed: int = 0
    methods: tuple = NULL_POWER_METHODS

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("n must be >= 20")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.case not in ("null", "power"):
            raise ValueError("case must be 'null' or 'power'")


@dataclass(frozen=True)
class NoisyConfig:
    n: int = 1000
    p: int = 50
    n_relevant: int = 5
    relevant_pool: int = 10
    reps: int = 100
    forest_params: ForestParams = ForestParams(n_trees=100, mtry=3, min_leaf=1)
    seed: int = 0
    fixed_relevant: bool = False
    methods: tuple = NOISY_METHODS

    def __post_init__(self):
        if not self.n_relevant <= self.relevant_pool <= self.p:
            raise ValueError("need n_relevant <= relevant_pool <= p")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")


@dataclass
class StudyResult:
    """Long-format records (rep, method, feature, score) plus a summary."""

    study: str
    seed: int
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "method", "feature", "score"])
        for r in self.records:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"study": self.study, "seed": self.seed, "config": self.config,
                           "summary": self.summary}, indent=2, default=_jsonable)

    def write(self, outdir, header: str = "") -> list:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        stem = outdir / f"{self.study}_{self.seed}"
        paths = [stem.with_suffix(".csv"), stem.with_suffix(".json")]
        paths[0].write_text(header + self.to_csv())
        paths[1].write_text(self.to_json())
        return paths


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    d["methods"] = list(d["methods"])
    return d


def _rep_rngs(seed: int, reps: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(reps)]


def _mean_se(x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    se = x.std(ddof=1) / np.sqrt(x.size) if x.size > 1 else float("nan")
    return float(x.mean()), float(se)


# ---------------------------------------------------------------------------
# data generators

def gen_strobl(config: StroblConfig, rng: np.random.Generator) -> Dataset:
    """One continuous and four categorical predictors (2, 4, 10, 20 levels).

    Categories are coded 1..k with equal probabilities. In the power case
    P(y=1 | X2=1) = 0.35 and P(y=1 | X2=2) = 0.65.
    """
    n = config.n
    cols = [rng.uniform(0.0, 1.0, n)]
    for k in STROBL_ARITY[1:]:
        cols.append(rng.integers(1, k + 1, n).astype(np.float64))
    X = np.column_stack(cols)
    if config.case == "null":
        y = rng.binomial(1, 0.5, n)
    else:
        y = rng.binomial(1, np.where(X[:, 1] == 2, 0.65, 0.35))
    return Dataset(X, y, ("X1", "X2", "X3", "X4", "X5"), STROBL_ARITY, 2)


def noisy_probability(X, relevant) -> np.ndarray:
    """P(y=1|x) = logistic(2/5 * sum_{j in S} x_j / j - 1), j 1-based."""
    relevant = np.asarray(relevant)
    X = np.atleast_2d(X)
    s = (X[:, relevant] / (relevant + 1)).sum(axis=1)
    return expit(2.0 / len(relevant) * s - 1.0)


def gen_noisy(config: NoisyConfig, rng: np.random.Generator, relevant=None):
    """Discrete features where column j (1-based) is uniform on {0, ..., j}.

    Returns the dataset and the 0-based indices of the relevant columns.
    """
    if relevant is None:
        relevant = np.sort(rng.choice(config.relevant_pool, config.n_relevant, replace=False))
    relevant = np.asarray(relevant, dtype=np.int64)
    X = np.column_stack([rng.integers(0, j + 2, config.n) for j in range(config.p)]).astype(np.float64)
    y = rng.binomial(1, noisy_probability(X, relevant))
    if y.min() == y.max():
        y[0] = 1 - y[0]
    names = tuple(f"x{j + 1}" for j in range(config.p))
    return Dataset(X, y, names, tuple(j + 2 for j in range(config.p)), 2), relevant


# ---------------------------------------------------------------------------
# metrics

def auc(scores, relevance) -> float:
    """Probability that a relevant feature outscores a noise feature, ties 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance).astype(bool)
    pos, neg = scores[relevance], scores[~relevance]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs both relevant and noise features")
    diff = pos[:, None] - neg[None, :]
    return float(np.mean(diff > 0) + 0.5 * np.mean(diff == 0))


# ---------------------------------------------------------------------------
# studies

def run_noisy(config: NoisyConfig) -> StudyResult:
    """AUC of every method at separating relevant from noise features."""
    res = StudyResult("noisy", config.seed, _config_dict(config))
    aucs = {m: [] for m in config.methods}
    fixed = None
    if config.fixed_relevant:
        fixed = np.sort(np.random.default_rng(config.seed).choice(
            config.relevant_pool, config.n_relevant, replace=False))
    for r, rng in enumerate(_rep_rngs(config.seed, config.reps)):
        ds, relevant = gen_noisy(config, rng, fixed)
        params = replace(config.forest_params, seed=int(rng.integers(2**31)))
        forest = fit_forest(ds, params)
        reports = compute_scores(forest, ds, config.methods, rng)
        truth = np.zeros(config.p, dtype=bool)
        truth[relevant] = True
        for m, rep in reports.items():
            aucs[m].append(auc(rep.scores, truth))
            res.records.extend((r, m, name, s) for name, s in zip(ds.column_names, rep.scores))
    table = {}
    for m, vals in aucs.items():
        mean, se = _mean_se(vals)
        table[m] = {"mean": mean, "se": se}
    res.summary = {"auc": table, "auc_per_rep": aucs,
                   "ranking": sorted(table, key=lambda m: -table[m]["mean"])}
    return res


def run_null_power(config: StroblConfig) -> StudyResult:
    """Per-feature score distributions over repetitions of the Strobl design.

    ``se_median`` is a bootstrap standard error of the median over reps.
    """
    res = StudyResult(config.case, config.seed, _config_dict(config))
    names = ("X1", "X2", "X3", "X4", "X5")
    scores = {m: [] for m in config.methods}
    for r, rng in enumerate(_rep_rngs(config.seed, config.reps)):
        ds = gen_strobl(config, rng)
        params = replace(config.forest_params, seed=int(rng.integers(2**31)))
        forest = fit_forest(ds, params)
        for m, rep in compute_scores(forest, ds, config.methods, rng).items():
            scores[m].append(rep.scores)
            res.records.extend((r, m, name, s) for name, s in zip(names, rep.scores))
    summary = {}
    boot = np.random.default_rng(config.seed).integers(0, config.reps, (N_BOOT, config.reps))
    for m, rows in scores.items():
        S = np.array(rows)
        q1, med, q3 = np.percentile(S, [25, 50, 75], axis=0)
        se_med = np.median(S[boot], axis=1).std(axis=0, ddof=1)
        se = S.std(axis=0, ddof=1) / np.sqrt(len(S)) if len(S) > 1 else np.full(S.shape[1], np.nan)
        first = np.bincount(np.argmax(S, axis=1), minlength=S.shape[1]) / len(S)
        summary[m] = {
            name: {"median": med[j], "q1": q1[j], "q3": q3[j], "se_median": se_med[j],
                   "mean": S[:, j].mean(), "se": se[j], "frac_ranked_first": first[j]}
            for j, name in enumerate(names)
        }
    res.summary = summary
    return res


def run_titanic(path=None, forest_params: Optional[ForestParams] = None, seeds: Sequence[int] = range(10),
                shuffle_ids: bool = False, methods: tuple = TITANIC_METHODS) -> StudyResult:
    """Importance tables for the Titanic data, repeated over forest seeds.

    Besides the methods in ``methods`` this records the tree-averaged mean of
    contribution * label over inbag and OOB rows (``mdi_cfc_in`` /
    ``mdi_cfc_oob``) and the label-1 restricted versions (``*_restricted``).
    """
    params = forest_params or ForestParams(n_trees=100, mtry=2, min_leaf=1)
    seeds = list(seeds)
    res = StudyResult("titanic", seeds[0] if seeds else 0,
                      {"path": str(path) if path else "bundled", "forest_params": asdict(params),
                       "seeds": seeds, "shuffle_ids": shuffle_ids, "methods": list(methods)})
    per_method: dict = {}
    ds = None
    for s in seeds:
        ds = load_titanic(path, shuffle_ids=shuffle_ids, seed=s)
        forest = fit_forest(ds, replace(params, seed=s))
        reports = compute_scores(forest, ds, methods, np.random.default_rng(s))
        scores = {m: rep.scores for m, rep in reports.items()}
        for subset, tag in (("inbag", "in"), ("oob", "oob")):
            for restricted in (False, True):
                key = f"mdi_cfc_{tag}" + ("_restricted" if restricted else "")
                scores[key] = np.mean([mdi_via_cfc(t, ds, subset, restricted) for t in forest.trees], axis=0)
        for m, v in scores.items():
            per_method.setdefault(m, []).append(v)
            res.records.extend((s, m, name, x) for name, x in zip(ds.column_names, v))
    summary = {}
    for m, rows in per_method.items():
        S = np.array(rows)
        mean = S.mean(axis=0)
        se = S.std(axis=0, ddof=1) / np.sqrt(len(S)) if len(S) > 1 else np.full(S.shape[1], np.nan)
        total = np.abs(mean).sum()
        top = np.abs(mean).max()
        summary[m] = {
            name: {"mean": mean[j], "se": se[j],
                   "share": abs(mean[j]) / total if total > 0 else 0.0,
                   "scaled": abs(mean[j]) / top if top > 0 else 0.0}
            for j, name in enumerate(ds.column_names)
        }
    res.summary = summary
    return res


def run_null_split_bias(node_sizes: Sequence[int], reps: int, rng: np.random.Generator,
                        p: float = 0.5, oob_ratio: Optional[float] = 0.368) -> StudyResult:
    """Monte-Carlo bias of the OOB Gini decrease on an uninformative split.

    A parent with N inbag samples is split at random into children of sizes
    N_l, N_r >= 1 (the split variable is independent of the labels). Child OOB
    counts are ``max(2, round(oob_ratio * N_c))``; with ``oob_ratio=None`` the
    node size is the OOB count itself. OOB labels are Bernoulli(p). Children
    are weighted by inbag counts. Reports the mean and standard error of

        dG     = G(m) - N_l/N G(l) - N_r/N G(r),          G = p_oob (1 - p_oob)
        dG_hat = the same with G scaled by n_oob / (n_oob - 1)

    together with the exact expectation of dG given the drawn node sizes,
    whose nominal value is sigma^2 / N_oob(m); dG_hat has expectation 0.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    res = StudyResult("splitbias", 0, {"node_sizes": list(node_sizes), "reps": reps,
                                       "p": p, "oob_ratio": oob_ratio})
    sigma2 = p * (1.0 - p)
    table = {}
    for N in node_sizes:
        if N < 4:
            raise ValueError("node sizes must be >= 4")
        lo = 2 if oob_ratio is None else 1
        n_left = rng.binomial(N, 0.5, reps)
        bad = (n_left < lo) | (n_left > N - lo)
        while np.any(bad):
            n_left[bad] = rng.binomial(N, 0.5, np.count_nonzero(bad))
            bad = (n_left < lo) | (n_left > N - lo)
        n_right = N - n_left
        if oob_ratio is None:
            o_left, o_right = n_left, n_right
        else:
            o_left = np.maximum(2, np.rint(oob_ratio * n_left)).astype(np.int64)
            o_right = np.maximum(2, np.rint(oob_ratio * n_right)).astype(np.int64)
        o_parent = o_left + o_right
        k_left = rng.binomial(o_left, p)
        k_right = rng.binomial(o_right, p)

        def gini(k, n):
            q = k / n
            return q * (1.0 - q)

        g_m, g_l, g_r = gini(k_left + k_right, o_parent), gini(k_left, o_left), gini(k_right, o_right)
        w_l, w_r = n_left / N, n_right / N
        d = g_m - w_l * g_l - w_r * g_r
        c = lambda n: n / (n - 1.0)  # noqa: E731
        d_hat = c(o_parent) * g_m - w_l * c(o_left) * g_l - w_r * c(o_right) * g_r
        target = sigma2 * (-1.0 / o_parent + w_l / o_left + w_r / o_right)
        m, se = _mean_se(d)
        mh, seh = _mean_se(d_hat)
        table[str(N)] = {
            "mean_dG": m, "se_dG": se, "target_dG": float(target.mean()),
            "nominal_dG": float(np.mean(sigma2 / o_parent)),
            "mean_dG_hat": mh, "se_dG_hat": seh, "target_dG_hat": 0.0,
            "mean_oob_size": float(o_parent.mean()),
        }
        res.records.extend([(N, "dG", "mean", m), (N, "dG_hat", "mean", mh)])
    res.summary = table
    return res
