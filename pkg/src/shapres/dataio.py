"""Dataset ingestion, synthetic data, anomaly injection, and index splits.

CSV is the only ingestion format: comma delimiter, "." decimal point, header
row required. An optional id column supplies stable row identifiers; every
other non-target column is parsed as a 64-bit float. Missing values are a
hard error, never imputed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class CsvFormatError(ValueError):
    """Raised when a CSV file cannot be parsed into a Dataset."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Numeric regression data: (n, p) features, n targets, n unique ids."""

    features: np.ndarray
    targets: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-dimensional, got shape {features.shape}")
        if targets.ndim != 1:
            raise ValueError(f"targets must be 1-dimensional, got shape {targets.shape}")
        ids = tuple(str(i) for i in self.ids)
        if not (features.shape[0] == targets.shape[0] == len(ids)):
            raise ValueError(
                f"row count mismatch: {features.shape[0]} feature rows, "
                f"{targets.shape[0]} targets, {len(ids)} ids"
            )
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        if not np.all(np.isfinite(targets)):
            raise ValueError("targets contain non-finite values")
        if len(set(ids)) != len(ids):
            raise ValueError("ids are not pairwise distinct")
        features.flags.writeable = False
        targets.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def index_of(self, row_id: str) -> int:
        """Row index of an id; KeyError if absent."""
        try:
            return self._id_index[row_id]
        except AttributeError:
            lookup = {rid: k for k, rid in enumerate(self.ids)}
            object.__setattr__(self, "_id_index", lookup)
            return lookup[row_id]


@dataclass(frozen=True)
class SplitPlan:
    """Train/test row indices. Symmetric means train and test are the same."""

    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    symmetric: bool

    def __post_init__(self) -> None:
        train = tuple(int(i) for i in self.train_indices)
        test = tuple(int(i) for i in self.test_indices)
        for name, seq in (("train", train), ("test", test)):
            if any(i < 0 for i in seq):
                raise ValueError(f"negative index in {name}_indices")
            if len(set(seq)) != len(seq):
                raise ValueError(f"duplicate index in {name}_indices")
        if self.symmetric != (train == test):
            raise ValueError("symmetric flag inconsistent with index sequences")
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)

    def validate_for(self, ds: Dataset) -> None:
        """Check all indices address rows of ds."""
        top = max(self.train_indices + self.test_indices, default=-1)
        if top >= ds.n:
            raise ValueError(f"split index {top} out of range for dataset with {ds.n} rows")


def load_csv(path: str | Path, target_column: str, id_column: str | None = None) -> Dataset:
    """Parse a CSV file with a header row into a Dataset.

    Args:
        path: file to read.
        target_column: header name of the target column.
        id_column: header name of the id column; when None, a column literally
            named "id" is used if present, else row numbers become ids.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, header row required") from None
        rows = [row for row in reader if row]

    header = [h.strip() for h in header]
    if target_column not in header:
        raise CsvFormatError(f"{path}: target column {target_column!r} not in header {header}")
    if id_column is None and "id" in header:
        id_column = "id"
    if id_column is not None and id_column not in header:
        raise CsvFormatError(f"{path}: id column {id_column!r} not in header {header}")
    if id_column == target_column:
        raise CsvFormatError(f"{path}: id column and target column are both {id_column!r}")
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")

    target_pos = header.index(target_column)
    id_pos = header.index(id_column) if id_column is not None else None
    feature_names = [
        name for k, name in enumerate(header) if k != target_pos and k != id_pos
    ]
    feature_pos = [k for k in range(len(header)) if k != target_pos and k != id_pos]
    if not feature_pos:
        raise CsvFormatError(f"{path}: no feature columns besides id and target")

    n = len(rows)
    features = np.empty((n, len(feature_pos)), dtype=np.float64)
    targets = np.empty(n, dtype=np.float64)
    ids: list[str] = []
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise CsvFormatError(
                f"{path}: row {r} has {len(row)} cells, header has {len(header)}"
            )
        for j, pos in enumerate(feature_pos):
            try:
                features[r - 1, j] = float(row[pos])
            except ValueError:
                raise CsvFormatError(
                    f"{path}: non-numeric cell at row {r}, column {header[pos]!r}: {row[pos]!r}"
                ) from None
        try:
            targets[r - 1] = float(row[target_pos])
        except ValueError:
            raise CsvFormatError(
                f"{path}: non-numeric cell at row {r}, column {target_column!r}: "
                f"{row[target_pos]!r}"
            ) from None
        ids.append(row[id_pos] if id_pos is not None else str(r - 1))

    ds = Dataset(features=features, targets=targets, ids=tuple(ids))
    # Keep the column names around for write_csv round-trips.
    object.__setattr__(ds, "feature_names", tuple(feature_names))
    return ds


def write_csv(ds: Dataset, path: str | Path, target_column: str = "target") -> None:
    """Write a Dataset back to CSV; load_csv(write_csv(ds)) reproduces ds."""
    names = getattr(ds, "feature_names", None)
    if names is None or len(names) != ds.p:
        names = tuple(f"x{j}" for j in range(ds.p))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *names, target_column])
        for k in range(ds.n):
            writer.writerow(
                [
                    ds.ids[k],
                    *(repr(float(v)) for v in ds.features[k]),
                    repr(float(ds.targets[k])),
                ]
            )


def synthesize_linear(n: int, p: int, noise_sd: float, seed: int) -> Dataset:
    """Linear toy data: x ~ U[-1,1]^p, y = sum(x) + Normal(0, noise_sd^2)."""
    if n < 1 or p < 1:
        raise ValueError(f"need n >= 1 and p >= 1, got n={n}, p={p}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
    rng = np.random.default_rng(seed)
    features = rng.uniform(-1.0, 1.0, size=(n, p))
    targets = features.sum(axis=1) + rng.normal(0.0, noise_sd, size=n)
    return Dataset(features=features, targets=targets, ids=tuple(str(k) for k in range(n)))


def inject_anomalies(
    ds: Dataset, count: int, shift: float, seed: int
) -> tuple[Dataset, tuple[str, ...]]:
    """Shift `count` seeded-random targets by `shift`; returns (copy, affected ids)."""
    if not 0 < count <= ds.n:
        raise ValueError(f"count must be in (0, {ds.n}], got {count}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(ds.n, size=count, replace=False))
    targets = ds.targets.copy()
    targets[chosen] += shift
    out = Dataset(features=ds.features.copy(), targets=targets, ids=ds.ids)
    names = getattr(ds, "feature_names", None)
    if names is not None:
        object.__setattr__(out, "feature_names", names)
    return out, tuple(ds.ids[k] for k in chosen)


def make_split(ds: Dataset, test_fraction: float, seed: int, symmetric: bool) -> SplitPlan:
    """Index split: symmetric uses every row for both sides, else a seeded
    disjoint split with round(n * test_fraction) test rows (at least 1 per side)."""
    everything = tuple(range(ds.n))
    if symmetric:
        return SplitPlan(train_indices=everything, test_indices=everything, symmetric=True)
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must be in [0,1], got {test_fraction}")
    if ds.n < 2:
        raise ValueError("asymmetric split needs at least 2 rows")
    n_test = int(round(ds.n * test_fraction))
    n_test = min(max(n_test, 1), ds.n - 1)
    perm = np.random.default_rng(seed).permutation(ds.n)
    test = tuple(sorted(int(i) for i in perm[:n_test]))
    train = tuple(sorted(int(i) for i in perm[n_test:]))
    return SplitPlan(train_indices=train, test_indices=test, symmetric=False)
