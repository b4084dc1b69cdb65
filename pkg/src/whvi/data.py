"""CSV dataset ingestion: parsing, train/test splitting, standardization.

File format: a header row followed by comma-separated decimal rows; the
final column is the target, every other column is a feature.  Features
are standardized using statistics of the training split only (constant
columns get a standard deviation of 1); targets are left untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TASKS = ("regression", "classification")
TEST_FRACTION = 0.1

__all__ = ["Dataset", "load_csv", "TASKS", "TEST_FRACTION"]


@dataclass(frozen=True)
class Dataset:
    """Parsed, standardized dataset with a fixed train/test split."""

    X: np.ndarray  # (N, d_in) standardized features
    y: np.ndarray  # (N,) float targets, or int labels in 0..K-1
    feature_means: np.ndarray  # (d_in,) training-split means
    feature_stds: np.ndarray  # (d_in,) training-split stds, all > 0
    split_seed: int
    train_idx: np.ndarray  # sorted row indices of the training split
    test_idx: np.ndarray  # sorted row indices of the held-out split
    task: str
    label_values: tuple = field(default=())  # original labels, sorted

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features contain non-finite values")
        if np.any(self.feature_stds <= 0.0):
            raise ValueError("feature stds must be positive")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task != "classification":
            raise ValueError("n_classes is defined for classification datasets")
        return len(self.label_values)

    def train_arrays(self):
        return self.X[self.train_idx], self.y[self.train_idx]

    def test_arrays(self):
        return self.X[self.test_idx], self.y[self.test_idx]


def _parse_rows(path, text):
    """Split file text into (header_fields, value_matrix); errors carry line numbers."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ValueError(f"{path}, line 1: empty file (expected a header row)")
    header = [h.strip() for h in lines[0].split(",")]
    n_cols = len(header)
    if n_cols < 2:
        raise ValueError(
            f"{path}, line 1: need at least one feature column and a target column"
        )
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != n_cols:
            raise ValueError(
                f"{path}, line {lineno}: expected {n_cols} comma-separated fields, "
                f"found {len(cells)}"
            )
        row = np.empty(n_cols)
        for j, cell in enumerate(cells):
            try:
                value = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}, line {lineno}: non-numeric value {cell.strip()!r} "
                    f"in column {header[j]!r}"
                ) from None
            if not math.isfinite(value):
                raise ValueError(
                    f"{path}, line {lineno}: non-finite value {cell.strip()!r} "
                    f"in column {header[j]!r}"
                )
            row[j] = value
        rows.append(row)
    if not rows:
        raise ValueError(f"{path}, line 2: no data rows after the header")
    return header, np.stack(rows)


def _encode_labels(path, raw):
    """Map integer-valued targets onto 0..K-1; reject fractional labels."""
    rounded = np.rint(raw)
    bad = np.nonzero(rounded != raw)[0]
    if bad.size:
        lineno = int(bad[0]) + 2
        raise ValueError(
            f"{path}, line {lineno}: classification target {raw[bad[0]]!r} "
            "is not an integer label"
        )
    values = np.unique(rounded.astype(np.int64))
    if values.size < 2:
        raise ValueError(f"{path}: classification needs at least two distinct labels")
    lookup = {int(v): k for k, v in enumerate(values)}
    encoded = np.array([lookup[int(v)] for v in rounded], dtype=np.int64)
    return encoded, tuple(int(v) for v in values)


def load_csv(path, task, split_seed=0) -> Dataset:
    """Parse a CSV file into a standardized, split :class:`Dataset`.

    The final column is the target.  Rows are shuffled by ``split_seed``
    and divided 90/10 into train/test; feature means and stds come from
    the training rows alone, with zero stds clamped to 1 so constant
    columns pass through unscaled.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    _, values = _parse_rows(path, text)
    X_raw = values[:, :-1]
    y_raw = values[:, -1]
    label_values = ()
    if task == "classification":
        y, label_values = _encode_labels(path, y_raw)
    else:
        y = y_raw.astype(np.float64)

    n = X_raw.shape[0]
    n_test = max(1, int(round(TEST_FRACTION * n)))
    if n - n_test < 1:
        raise ValueError(f"{path}: need at least 2 rows to form a train/test split")
    perm = np.random.default_rng(split_seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])

    means = X_raw[train_idx].mean(axis=0)
    stds = X_raw[train_idx].std(axis=0)
    stds = np.where(stds == 0.0, 1.0, stds)
    X = (X_raw - means[None, :]) / stds[None, :]
    return Dataset(
        X=X,
        y=y,
        feature_means=means,
        feature_stds=stds,
        split_seed=int(split_seed),
        train_idx=train_idx,
        test_idx=test_idx,
        task=task,
        label_values=label_values,
    )
