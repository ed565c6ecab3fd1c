"""Tabular dataset loading and numeric encoding."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MISSING = {"", "NA"}

TITANIC_FEATURES = ("PassengerId", "Age", "Sex", "Pclass")
TITANIC_LABEL = "Survived"


class DataError(ValueError):
    """Raised for unreadable, malformed or unusable input data."""


@dataclass(frozen=True)
class Dataset:
    """Numeric feature matrix with integer class labels.

    ``arity[j]`` is the number of categories of column j, or ``None`` for
    columns treated as continuous. Loaded text columns have exactly that many
    observed values; generated columns may leave some categories unobserved.
    """

    features: np.ndarray
    labels: np.ndarray
    column_names: tuple
    arity: tuple
    n_classes: int
    categories: dict = field(default_factory=dict)
    label_name: str = "y"
    n_dropped: int = 0

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        if y.shape != (X.shape[0],):
            raise DataError("labels must have one entry per row")
        if X.shape[0] == 0:
            raise DataError("dataset is empty")
        if len(self.column_names) != X.shape[1] or len(self.arity) != X.shape[1]:
            raise DataError("column_names/arity do not match the feature count")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain missing or non-finite values")
        if self.n_classes < 2:
            raise DataError("need at least two classes")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise DataError("labels must lie in {0, ..., n_classes - 1}")
        for j, a in enumerate(self.arity):
            # a declared support may be larger than what a small sample shows
            if a is not None and len(np.unique(X[:, j])) > a:
                raise DataError(f"column {self.column_names[j]!r} has more than {a} distinct values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "arity", tuple(self.arity))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def decode(self, column: str, codes) -> list:
        """Map integer codes of a categorical text column back to strings."""
        names = self.categories[column]
        return [names[int(c)] for c in np.atleast_1d(codes)]

    def require_binary(self) -> "Dataset":
        if self.n_classes != 2:
            raise DataError(f"binary labels required, got {self.n_classes} classes")
        return self


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _encode_column(values: Sequence[str]):
    """Return (float codes, category list or None)."""
    if all(_is_number(v) for v in values):
        return np.array([float(v) for v in values]), None
    categories: dict[str, int] = {}
    codes = [categories.setdefault(v, len(categories)) for v in values]
    return np.array(codes, dtype=np.float64), list(categories)


def load_csv(path, label_column: str, feature_columns: Sequence[str]) -> Dataset:
    """Read a CSV with a header row into a :class:`Dataset`.

    Rows with an empty or ``NA`` field in any selected column are dropped and
    counted in ``n_dropped``. Text columns are integer-coded in order of first
    appearance among the kept rows.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [label_column, *feature_columns]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"missing column(s) {missing} in {path}")
        rows = []
        dropped = 0
        for rec in reader:
            vals = [(rec.get(c) or "").strip() for c in wanted]
            if any(v in MISSING for v in vals):
                dropped += 1
                continue
            rows.append(vals)
    if not rows:
        raise DataError(f"no rows left in {path} after dropping missing values")

    columns = list(zip(*rows))
    label_raw = columns[0]
    if all(_is_number(v) for v in label_raw):
        numeric = np.array([float(v) for v in label_raw])
        if not np.all(numeric == np.round(numeric)):
            raise DataError(f"label column {label_column!r} is not integer-valued")
        levels, labels = np.unique(numeric, return_inverse=True)
        label_levels = [str(int(v)) for v in levels]
    else:
        codes, label_levels = _encode_column(label_raw)
        labels = codes.astype(np.int64)

    feats, arity, categories = [], [], {}
    for name, raw in zip(feature_columns, columns[1:]):
        codes, cats = _encode_column(raw)
        feats.append(codes)
        if cats is None:
            arity.append(None)
        else:
            arity.append(len(cats))
            categories[name] = cats
    categories[label_column] = label_levels
    n_classes = len(label_levels)
    if n_classes < 2:
        raise DataError(f"label column {label_column!r} has a single class")
    return Dataset(
        features=np.column_stack(feats),
        labels=labels,
        column_names=tuple(feature_columns),
        arity=tuple(arity),
        n_classes=n_classes,
        categories=categories,
        label_name=label_column,
        n_dropped=dropped,
    )


def titanic_path() -> Path:
    """Location of the bundled 891-row Kaggle Titanic training file."""
    return Path(str(resources.files("rfdebias") / "data" / "titanic_train.csv"))


def load_titanic(path=None, shuffle_ids: bool = False, seed: Optional[int] = None) -> Dataset:
    """Titanic survival data with features PassengerId, Age, Sex, Pclass.

    Rows without Age are excluded. ``shuffle_ids`` randomly permutes the
    PassengerId column, which keeps it an irrelevant high-cardinality feature.
    """
    path = titanic_path() if path is None else Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    need = ["PassengerId", TITANIC_LABEL, "Pclass", "Sex", "Age"]
    absent = [c for c in need if c not in header]
    if absent:
        raise DataError(f"not a Titanic file, missing {absent}")
    ds = load_csv(path, TITANIC_LABEL, TITANIC_FEATURES)
    if ds.n_classes != 2:
        raise DataError("Survived must be binary")
    if shuffle_ids:
        X = ds.features.copy()
        rng = np.random.default_rng(seed)
        X[:, 0] = rng.permutation(X[:, 0])
        ds = Dataset(X, ds.labels, ds.column_names, ds.arity, ds.n_classes,
                     ds.categories, ds.label_name, ds.n_dropped)
    return ds
