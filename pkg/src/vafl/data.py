"""Vertically partitioned datasets, synthetic generators, CSV I/O and minibatch sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DataError
from .numerics import Rng, make_rng

__all__ = [
    "VerticalDataset",
    "BatchSpec",
    "vertical_partition",
    "gen_synthetic",
    "load_csv",
    "write_csv",
    "train_test_split",
    "standardize",
    "sample_minibatch",
]


@dataclass(frozen=True)
class VerticalDataset:
    """``blocks[m]`` is client m's ``N x p_m`` feature block; ``y`` stays with the server."""

    blocks: tuple
    y: np.ndarray
    task: str = "logistic"

    def __post_init__(self):
        n = self.y.shape[0]
        if any(b.ndim != 2 or b.shape[0] != n for b in self.blocks):
            raise DataError("every client block must have one row per label")

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def M(self) -> int:
        return len(self.blocks)

    @property
    def widths(self) -> list[int]:
        return [b.shape[1] for b in self.blocks]

    @property
    def feature_split(self) -> list[tuple[int, int]]:
        """Half-open column ranges ``[start, stop)`` of each client."""
        edges = np.concatenate([[0], np.cumsum(self.widths)]).astype(int)
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def table(self) -> np.ndarray:
        return np.hstack(self.blocks)

    def subset(self, idx) -> "VerticalDataset":
        idx = np.asarray(idx)
        return VerticalDataset(tuple(b[idx] for b in self.blocks), self.y[idx], self.task)


@dataclass(frozen=True)
class BatchSpec:
    """Per-client minibatch law: i.i.d. uniform with replacement, or the full dataset."""

    batch_size: int = 1
    sampling: str = "uniform"

    def __post_init__(self):
        if self.sampling not in ("uniform", "full"):
            raise ConfigurationError(f"unknown sampling {self.sampling!r}")
        if self.sampling == "uniform" and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def vertical_partition(table, labels, split, task: str = "logistic") -> VerticalDataset:
    table = np.asarray(table, dtype=float)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    split = [int(s) for s in split]
    if table.ndim != 2:
        raise DataError("feature table must be 2-D")
    if any(s < 1 for s in split) or sum(split) != table.shape[1]:
        raise ConfigurationError(f"split {split} does not partition {table.shape[1]} columns")
    if labels.shape[0] != table.shape[0]:
        raise DataError("label count does not match row count")
    edges = np.concatenate([[0], np.cumsum(split)]).astype(int)
    blocks = tuple(table[:, a:b].copy() for a, b in zip(edges[:-1], edges[1:]))
    return VerticalDataset(blocks, labels.copy(), task)


def even_split(p: int, M: int) -> list[int]:
    """Contiguous near-equal widths, larger blocks first."""
    if M < 1 or p < M:
        raise ConfigurationError(f"cannot split {p} features among {M} clients")
    base, extra = divmod(p, M)
    return [base + (1 if m < extra else 0) for m in range(M)]


def gen_synthetic(N: int, p: int, M: int, task: str = "logistic", noise_std: float = 0.0,
                  seed: int = 0, split=None, weight_scale: float = 1.0) -> VerticalDataset:
    """Standard Gaussian features and a linear ground truth drawn once from ``seed``.

    Logistic labels are drawn from ``sigmoid(x . w)``; regression labels are
    ``x . w + noise_std * eps``.
    """
    if min(N, p, M) < 1:
        raise ConfigurationError("N, p and M must be >= 1")
    if task not in ("logistic", "regression"):
        raise ConfigurationError(f"unknown task {task!r}")
    g = make_rng(seed).gen
    X = g.standard_normal((N, p))
    w = weight_scale * g.standard_normal(p)
    s = X @ w
    if task == "logistic":
        y = np.where(g.random(N) < expit(s), 1.0, -1.0)
    else:
        y = s + noise_std * g.standard_normal(N) if noise_std > 0 else s
    return vertical_partition(X, y, split or even_split(p, M), task)


def standardize(ds: VerticalDataset, ref: VerticalDataset | None = None) -> VerticalDataset:
    """Zero-mean, unit-variance columns using statistics of ``ref`` (default ``ds``)."""
    ref = ref or ds
    blocks = []
    for b, r in zip(ds.blocks, ref.blocks):
        mu, sd = r.mean(axis=0), r.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        blocks.append((b - mu) / sd)
    return VerticalDataset(tuple(blocks), ds.y, ds.task)


def load_csv(path, label_column: int, split, header: bool = False, task: str = "logistic",
             standardize_features: bool = True) -> VerticalDataset:
    """Read a numeric comma-separated file.  ``label_column`` is zero-based."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for i, rec in enumerate(reader):
            if i == 0 and header:
                continue
            if not rec or all(not c.strip() for c in rec):
                continue
            vals = []
            for j, cell in enumerate(rec):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell at row {i + 1}, column {j}: {cell!r}") from None
            if rows and len(vals) != len(rows[0]):
                raise DataError(f"{path}: row {i + 1} has {len(vals)} columns, expected {len(rows[0])}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    if not 0 <= label_column < arr.shape[1]:
        raise DataError(f"{path}: label column {label_column} out of range")
    y = arr[:, label_column]
    X = np.delete(arr, label_column, axis=1)
    ds = vertical_partition(X, y, split, task)
    return standardize(ds) if standardize_features else ds


def write_csv(ds: VerticalDataset, path, label_column: int | None = None, header: bool = False) -> None:
    """Write features and label; floats are written with ``repr`` so a reload is exact."""
    X = ds.table()
    label_column = X.shape[1] if label_column is None else label_column
    arr = np.insert(X, label_column, ds.y, axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            names = [f"x{j}" for j in range(X.shape[1])]
            names.insert(label_column, "y")
            w.writerow(names)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])


def train_test_split(ds: VerticalDataset, test_fraction: float):
    """Hold out the last ``test_fraction`` of the rows."""
    if not 0 <= test_fraction < 1:
        raise ConfigurationError("test_fraction must lie in [0, 1)")
    n_test = int(round(ds.N * test_fraction))
    n_train = ds.N - n_test
    train = ds.subset(np.arange(n_train))
    test = ds.subset(np.arange(n_train, ds.N)) if n_test else None
    return train, test


def sample_minibatch(ds, spec: BatchSpec, rng: Rng) -> np.ndarray:
    """Indices for one client activation, drawn from that client's own stream.

    ``ds`` is a dataset or just its sample count.
    """
    N = ds.N if isinstance(ds, VerticalDataset) else int(ds)
    if spec.sampling == "full":
        return np.arange(N)
    return rng.gen.integers(0, N, size=spec.batch_size)
