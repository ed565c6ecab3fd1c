import numpy as np
import pytest

from rfdebias.data import Dataset
from rfdebias.forest import ForestParams, fit_forest


def random_dataset(rng, n=None, p=None, n_classes=2, levels=None):
    """Small binary (or D-class) dataset with a mix of discrete and continuous columns."""
    n = int(rng.integers(20, 201)) if n is None else n
    p = int(rng.integers(2, 9)) if p is None else p
    cols = []
    for j in range(p):
        k = levels if levels is not None else int(rng.choice([2, 3, 5, 0]))
        cols.append(rng.integers(0, k, n).astype(float) if k else rng.normal(size=n).round(2))
    X = np.column_stack(cols)
    logit = X[:, 0] - X[:, 0].mean() + 0.5 * rng.normal(size=n)
    y = (logit > 0).astype(int) if n_classes == 2 else rng.integers(0, n_classes, n)
    y[:n_classes] = np.arange(n_classes)  # every class present
    return Dataset(X, y, tuple(f"x{j}" for j in range(p)), (None,) * p, n_classes)


def random_forest(seed, n_trees=5, **kw):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, **kw)
    mtry = int(rng.integers(1, ds.p + 1))
    forest = fit_forest(ds, ForestParams(n_trees=n_trees, mtry=mtry, seed=seed))
    return ds, forest


@pytest.fixture
def small():
    return random_forest(11, n_trees=10, n=120, p=4)
