"""Name-based registry of importance scorers.

Method names:

    mdi, mdi_oob, mda, cfc
    pg:<alpha>:<lambda>[:corrected]
    shap, shap_in, shap_oob          mean |SHAP| over all / inbag / OOB samples
    shap_w, shap_in_w, shap_oob_w    |mean SHAP * y| over the same samples
"""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .data import Dataset
from .explain import Cover, cfc_forest, global_cfc, shap_forest, split_importance
from .forest import Forest
from .importance import ImportanceReport, PGConfig, mda_permutation, mdi, mdi_oob, pg_importance

PLAIN = ("mdi", "mdi_oob", "mda", "cfc")
SHAP_SPLITS = {"shap": "all", "shap_in": "inbag", "shap_oob": "oob"}


def parse_pg(name: str) -> PGConfig:
    parts = name.split(":")
    if parts[0] != "pg" or len(parts) not in (3, 4):
        raise ValueError(f"bad penalized Gini method {name!r}; use pg:<alpha>:<lambda>[:corrected]")
    if len(parts) == 4 and parts[3] != "corrected":
        raise ValueError(f"unknown pg flag {parts[3]!r}")
    try:
        alpha, lam = float(parts[1]), float(parts[2])
    except ValueError:
        raise ValueError(f"bad number in {name!r}") from None
    return PGConfig(alpha, lam, bias_correct=len(parts) == 4)


def validate_method(name: str) -> str:
    """Return the canonical method name or raise ValueError."""
    if name in PLAIN:
        return name
    base = name[:-2] if name.endswith("_w") else name
    if base in SHAP_SPLITS:
        return name
    if name.startswith("pg:"):
        return parse_pg(name).name
    raise ValueError(f"unknown importance method {name!r}")


def needs_shap(methods: Iterable[str]) -> bool:
    return any(m.split("_")[0] == "shap" for m in methods)


def compute_scores(forest: Forest, dataset: Dataset, methods: Iterable[str],
                   rng: Optional[np.random.Generator] = None,
                   shap_cover=Cover.INBAG, shap_attr=None) -> dict:
    """Evaluate every requested method; SHAP values are computed once."""
    methods = [validate_method(m) for m in methods]
    names = dataset.column_names
    out: dict[str, ImportanceReport] = {}
    if needs_shap(methods) and shap_attr is None:
        shap_attr = shap_forest(forest, dataset.features, shap_cover, feature_names=names)
    for m in methods:
        if m == "mdi":
            rep = mdi(forest, names)
        elif m == "mdi_oob":
            rep = mdi_oob(forest, dataset)
        elif m == "mda":
            rep = mda_permutation(forest, dataset, 1, rng)
        elif m == "cfc":
            rep = global_cfc(cfc_forest(forest, dataset.features, Cover.INBAG, feature_names=names))
        elif m.startswith("pg:"):
            rep = pg_importance(forest, parse_pg(m), feature_names=names)
        else:
            weighted = m.endswith("_w")
            split = SHAP_SPLITS[m[:-2] if weighted else m]
            rep = split_importance(shap_attr, dataset.labels, split, weighted=weighted, method=m)
        rep.method = m
        out[m] = rep
    return out
