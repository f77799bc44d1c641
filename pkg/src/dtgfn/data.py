"""Tabular data ingestion, scaling and split construction.

Every :class:`Dataset` handed to the tree machinery has features scaled to
``[0, 1]`` and dense integer labels ``0..C-1``.  The unscaled (post one-hot)
values are kept alongside so that shift splits can threshold in the original
units.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np


class DataError(ValueError):
    """Base class for dataset problems (exit code 2 on the command line)."""


class DatasetNotFoundError(DataError, FileNotFoundError):
    pass


class MissingColumnError(DataError):
    pass


class ParseError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SingleClassError(DataError):
    pass


class SplitError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    feature_names: tuple[str, ...]
    provenance: str = ""
    class_names: Optional[tuple[str, ...]] = None
    raw: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2-d array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError("labels must have one entry per row")
        if self.num_classes < 2:
            raise DataError("num_classes must be at least 2")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError("labels out of range")
        if not np.all((X >= 0.0) & (X <= 1.0)):
            raise DataError("features must lie in [0, 1]")
        if len(self.feature_names) != X.shape[1]:
            raise DataError("one feature name per column required")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows: np.ndarray, provenance: Optional[str] = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            raw=None if self.raw is None else self.raw[rows],
            provenance=self.provenance if provenance is None else provenance,
        )

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 1
    train_fraction: float = 0.8
    shift: Optional[tuple[int, float, bool]] = None


def minmax_scale(column) -> np.ndarray:
    """Scale a column to [0, 1]; constant columns map to zeros."""
    x = np.asarray(column, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot scale an empty column")
    if not np.all(np.isfinite(x)):
        raise DataError("column contains NaN or infinite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _scale_with(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    out = np.where(hi > lo, (values - lo) / span, 0.0)
    # values outside the fitted range are clipped; routing on interior thresholds is unaffected
    return np.clip(out, 0.0, 1.0)


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"row {row}: column {col!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}: column {col!r}: non-finite value {cell!r}")
    return v


def load_csv(
    path: str | os.PathLike,
    label_column: str,
    categorical_columns: Iterable[str] = (),
) -> Dataset:
    """Read a headed CSV into a scaled :class:`Dataset`.

    Categorical columns are one-hot expanded (categories in sorted order,
    named ``col=value``); numeric columns are min-max scaled over the whole
    file; labels are mapped to ``0..C-1`` in sorted order of their string
    values.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise DatasetNotFoundError(f"no such dataset file: {path}")
    categorical = set(categorical_columns)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    for name in [label_column, *sorted(categorical)]:
        if name not in header:
            raise MissingColumnError(f"{path}: column {name!r} not found")
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise ParseError(f"row {i}: expected {len(header)} cells, got {len(r)}")
        if any(c.strip() == "" for c in r):
            raise ParseError(f"row {i}: missing value")

    label_idx = header.index(label_column)
    raw_labels = [r[label_idx].strip() for r in rows]
    classes = sorted(set(raw_labels))
    if len(classes) < 2:
        raise SingleClassError(f"{path}: label column {label_column!r} has a single class")
    class_index = {c: k for k, c in enumerate(classes)}
    labels = np.array([class_index[v] for v in raw_labels], dtype=np.int64)

    columns: list[np.ndarray] = []
    names: list[str] = []
    for j, name in enumerate(header):
        if j == label_idx:
            continue
        cells = [r[j].strip() for r in rows]
        if name in categorical:
            for level in sorted(set(cells)):
                columns.append(np.array([c == level for c in cells], dtype=np.float64))
                names.append(f"{name}={level}")
        else:
            columns.append(np.array([_parse_float(c, i, name) for i, c in enumerate(cells, start=2)]))
            names.append(name)
    if not columns:
        raise DataError(f"{path}: no feature columns")
    raw = np.column_stack(columns)
    scaled = np.column_stack([minmax_scale(c) for c in raw.T])
    return Dataset(
        features=scaled,
        labels=labels,
        num_classes=len(classes),
        feature_names=tuple(names),
        provenance=f"csv:{os.path.basename(path)}",
        class_names=tuple(classes),
        raw=raw,
    )


def write_csv(d: Dataset, path: str | os.PathLike, label_column: str = "label") -> None:
    """Write a dataset in the format :func:`load_csv` reads back."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*d.feature_names, label_column])
        for x, y in zip(d.features, d.labels):
            w.writerow([*(repr(float(v)) for v in x), int(y)])


def _check_fraction(frac: float, n: int) -> tuple[int, int]:
    if not 0.0 < frac < 1.0:
        raise SplitError(f"fraction must lie in (0, 1), got {frac}")
    n_train = int(math.floor(n * frac))
    n_test = n - n_train
    if n_train < 1 or n_test < 1:
        raise SplitError(f"fraction {frac} on {n} rows leaves an empty partition")
    return n_train, n_test


def split_indices(n: int, seed: int, train_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n_train, _ = _check_fraction(train_fraction, n)
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train:]


def train_test_split(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    if spec.shift is not None:
        raise SplitError("use domain_shift_split for shifted splits")
    train_idx, test_idx = split_indices(d.n, spec.seed, spec.train_fraction)
    tag = f"{d.provenance}|seed={spec.seed}"
    return d.subset(train_idx, tag + "|train"), d.subset(test_idx, tag + "|test")


def rescale_from(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Re-fit min-max scaling on ``train.raw`` and apply it to every dataset."""
    if train.raw is None or any(o.raw is None for o in others):
        raise DataError("rescaling needs the unscaled values")
    lo, hi = train.raw.min(axis=0), train.raw.max(axis=0)
    return tuple(replace(ds, features=_scale_with(ds.raw, lo, hi)) for ds in (train, *others))


def domain_shift_split(
    d: Dataset,
    feature: int,
    threshold: float,
    id_test_size: float | int = 0.2,
    seed: int = 42,
) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, in-distribution test, out-of-distribution test).

    Rows with ``value <= threshold`` on ``feature`` (compared in the original
    units when available) are in-distribution and get a seeded split; the
    remaining rows form the OOD test set.  ``id_test_size`` is a fraction of
    the in-distribution rows (test size floored) or an absolute row count.
    Scaling is re-fitted on the training rows only.
    """
    values = (d.raw if d.raw is not None else d.features)[:, feature]
    if not values.min() < threshold < values.max():
        raise SplitError(
            f"threshold {threshold} not strictly inside the observed range "
            f"[{values.min()}, {values.max()}] of feature {feature}"
        )
    inside = np.flatnonzero(values <= threshold)
    outside = np.flatnonzero(values > threshold)
    if isinstance(id_test_size, (int, np.integer)) and not isinstance(id_test_size, bool):
        n_test = int(id_test_size)
    else:
        if not 0.0 < id_test_size < 1.0:
            raise SplitError(f"id_test_size fraction must lie in (0, 1), got {id_test_size}")
        n_test = int(math.floor(len(inside) * id_test_size))
    if n_test < 1 or n_test >= len(inside):
        raise SplitError("in-distribution split leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(inside)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    tag = f"{d.provenance}|shift f{feature}<={threshold}|seed={seed}"
    parts = (
        d.subset(train_idx, tag + "|train"),
        d.subset(test_idx, tag + "|test_id"),
        d.subset(outside, tag + "|test_ood"),
    )
    if d.raw is None:
        return parts
    return rescale_from(*parts)


def gen_hidden_xor(
    n: int,
    num_noise: int,
    noise_kind: str = "real",
    seed: int = 0,
) -> Dataset:
    """Hidden-XOR data: label = a XOR b for binary columns 0 and 1.

    The four (a, b) patterns are tiled so each appears ``n // 4`` or
    ``n // 4 + 1`` times, then rows are shuffled.  Noise columns are fair
    coins (``binary``) or uniform on [0, 1] (``real``), drawn independently
    of the label.
    """
    if n < 4:
        raise DataError("hidden XOR needs at least 4 rows to cover every pattern")
    if noise_kind not in ("binary", "real"):
        raise DataError(f"unknown noise kind {noise_kind!r}")
    if num_noise < 0:
        raise DataError("num_noise must be non-negative")
    rng = np.random.default_rng(seed)
    patterns = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float64)
    ab = np.tile(patterns, (n // 4 + 1, 1))[:n]
    ab = ab[rng.permutation(n)]
    if noise_kind == "binary":
        noise = rng.integers(0, 2, size=(n, num_noise)).astype(np.float64)
    else:
        noise = rng.random((n, num_noise))
    # scaled up front so that a CSV round trip through load_csv is the identity
    X = np.column_stack([minmax_scale(c) for c in np.hstack([ab, noise]).T])
    y = (ab[:, 0].astype(np.int64) ^ ab[:, 1].astype(np.int64))
    names = ("xor_a", "xor_b", *(f"noise_{k}" for k in range(num_noise)))
    return Dataset(
        features=X,
        labels=y,
        num_classes=2,
        feature_names=names,
        provenance=f"hidden_xor(n={n},noise={num_noise},{noise_kind},seed={seed})",
        raw=X.copy(),
    )


def gen_anomaly_blobs(
    n_normal: int,
    n_anomalous: int,
    d: int = 2,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Synthetic anomaly task: returns (train, test).

    Class 0 is a Gaussian cloud around 0.35; class 1 (anomalous) is uniform
    on the far corner ``[0.8, 1]^d``.  The training set holds normal rows
    only; the test set holds fresh normal rows plus every anomaly.  Scaling
    is fitted on the training rows.
    """
    rng = np.random.default_rng(seed)
    normal = np.clip(rng.normal(0.35, 0.08, size=(2 * n_normal, d)), 0.0, 1.0)
    anomalous = rng.uniform(0.8, 1.0, size=(n_anomalous, d))
    names = tuple(f"x{k}" for k in range(d))
    train_raw = normal[:n_normal]
    test_raw = np.vstack([normal[n_normal:], anomalous])
    test_y = np.r_[np.zeros(n_normal, dtype=np.int64), np.ones(n_anomalous, dtype=np.int64)]
    train = Dataset(train_raw, np.zeros(n_normal, dtype=np.int64), 2, names, "anomaly_blobs|train", raw=train_raw)
    test = Dataset(test_raw, test_y, 2, names, "anomaly_blobs|test", raw=test_raw)
    return rescale_from(train, test)

