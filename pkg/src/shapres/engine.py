"""Coalition valuation and Shapley decomposition of test residuals.

The value of a training coalition S is the residual vector of the model fit
on S, evaluated on the test set; the empty coalition is worth the zero
vector by convention. decompose_exact enumerates all 2^N coalitions;
decompose_monte_carlo averages prefix marginals over sampled permutations
with optional truncation and a windowed convergence stop.

Determinism contract: Monte Carlo results are a pure function of
(spec, ds, split, cfg) and are bit-identical for any thread count.
Permutation t draws from its own RNG substream and places training slot
t mod N first, so any permutation budget divisible by N covers first
positions evenly; marginals are reduced in ascending permutation order.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from shapres.dataio import Dataset, SplitPlan
from shapres.models import ModelSpec, fit, predict

MAX_EXACT_TRAIN = 14
MC_CACHE_CAPACITY = 10_000

EFFICIENCY_RTOL = 1e-8


class EngineError(RuntimeError):
    """Estimator failure: cap exceeded, efficiency violated, bad arguments."""


@dataclass
class RunMeta:
    """Provenance of one decomposition run."""

    estimator: str
    seed: int
    permutations_used: int
    truncation_tol: float
    convergence_tol: float
    converged: bool
    wall_time_seconds: float
    model: dict
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "estimator": self.estimator,
            "seed": self.seed,
            "permutations_used": self.permutations_used,
            "truncation_tol": self.truncation_tol,
            "convergence_tol": self.convergence_tol,
            "converged": self.converged,
            "wall_time_seconds": self.wall_time_seconds,
            "model": self.model,
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunMeta":
        core = {
            "estimator",
            "seed",
            "permutations_used",
            "truncation_tol",
            "convergence_tol",
            "converged",
            "wall_time_seconds",
            "model",
        }
        extra = {k: v for k, v in d.items() if k not in core}
        return cls(
            estimator=d.get("estimator", "unknown"),
            seed=int(d.get("seed", 0)),
            permutations_used=int(d.get("permutations_used", 0)),
            truncation_tol=float(d.get("truncation_tol", 0.0)),
            convergence_tol=float(d.get("convergence_tol", 0.0)),
            converged=bool(d.get("converged", False)),
            wall_time_seconds=float(d.get("wall_time_seconds", 0.0)),
            model=dict(d.get("model", {})),
            extra=extra,
        )


@dataclass(frozen=True, eq=False)
class PhiMatrix:
    """N_test x N_train decomposition: values[i][j] is the contribution of
    training instance j to the residual of test instance i."""

    values: np.ndarray
    residuals_full: np.ndarray
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    meta: RunMeta

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        residuals = np.asarray(self.residuals_full, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-dimensional, got shape {values.shape}")
        n_test, n_train = values.shape
        if residuals.shape != (n_test,):
            raise ValueError(
                f"residuals_full has shape {residuals.shape}, expected ({n_test},)"
            )
        if len(self.train_ids) != n_train or len(self.test_ids) != n_test:
            raise ValueError("id vectors do not match the values shape")
        if not np.all(np.isfinite(values)) or not np.all(np.isfinite(residuals)):
            raise ValueError("non-finite entries in decomposition")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "residuals_full", residuals)
        object.__setattr__(self, "train_ids", tuple(str(i) for i in self.train_ids))
        object.__setattr__(self, "test_ids", tuple(str(i) for i in self.test_ids))
        # Efficiency holds unconditionally for exact enumeration and for
        # Monte Carlo runs without truncation (truncation biases row sums).
        if self.meta.estimator == "exact" or (
            self.meta.estimator == "monte_carlo" and self.meta.truncation_tol == 0.0
        ):
            gap = efficiency_gap(values, residuals)
            if gap > EFFICIENCY_RTOL:
                raise EngineError(
                    f"efficiency violated: max relative row-sum gap {gap:.3e}"
                )

    @property
    def n_train(self) -> int:
        return self.values.shape[1]

    @property
    def n_test(self) -> int:
        return self.values.shape[0]


def efficiency_gap(values: np.ndarray, residuals_full: np.ndarray) -> float:
    """Max over rows of |row sum - residual| / max(1, |residual|)."""
    gaps = np.abs(values.sum(axis=1) - residuals_full)
    return float((gaps / np.maximum(1.0, np.abs(residuals_full))).max())


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo sampling configuration.

    max_permutations defaults (None) to 3 * N_train at run time. The
    convergence window is clamped to the permutation budget. truncation_tol
    None resolves to 0.001 * RMS of the training targets; 0 disables
    truncation.
    """

    max_permutations: int | None = None
    convergence_tol: float = 0.01
    convergence_window: int = 100
    truncation_tol: float | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.max_permutations is not None and self.max_permutations < 1:
            raise ValueError(f"max_permutations must be >= 1, got {self.max_permutations}")
        if self.convergence_window < 1:
            raise ValueError(f"convergence_window must be >= 1, got {self.convergence_window}")
        if self.convergence_tol < 0:
            raise ValueError(f"convergence_tol must be >= 0, got {self.convergence_tol}")
        if self.truncation_tol is not None and self.truncation_tol < 0:
            raise ValueError(f"truncation_tol must be >= 0, got {self.truncation_tol}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


class CoalitionCache:
    """Thread-safe LRU cache of coalition values keyed by sorted index tuple.

    Hits return the stored array; values are treated as immutable. capacity
    None means unbounded.
    """

    def __init__(self, capacity: int | None = MC_CACHE_CAPACITY) -> None:
        self._data: OrderedDict[tuple, np.ndarray] = OrderedDict()
        self._capacity = capacity
        self._lock = threading.Lock()

    def get_or_compute(self, key: tuple, compute: Callable[[], np.ndarray]) -> np.ndarray:
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        value = compute()
        with self._lock:
            if key not in self._data:
                self._data[key] = value
                if self._capacity is not None and len(self._data) > self._capacity:
                    self._data.popitem(last=False)
            return self._data[key]

    def __len__(self) -> int:
        return len(self._data)


def shapley_weight(n: int, s: int) -> float:
    """Coalition weight s!(n-s-1)!/n! from the exact Shapley sum, in log space."""
    if not 0 <= s <= n - 1:
        raise ValueError(f"coalition size {s} out of range [0, {n - 1}]")
    return math.exp(math.lgamma(s + 1) + math.lgamma(n - s) - math.lgamma(n + 1))


def coalition_residuals(
    spec: ModelSpec,
    ds: Dataset,
    coalition: Sequence[int],
    test_indices: Sequence[int],
) -> np.ndarray:
    """Residual vector (prediction - target) on the test rows for the model
    fit on `coalition`; the empty coalition is worth the zero vector."""
    test_idx = [int(i) for i in test_indices]
    if not test_idx:
        raise ValueError("test_indices must be non-empty")
    if min(test_idx) < 0 or max(test_idx) >= ds.n:
        raise ValueError(f"test index out of range for dataset with {ds.n} rows")
    coalition = [int(i) for i in coalition]
    if not coalition:
        return np.zeros(len(test_idx), dtype=np.float64)
    model = fit(spec, ds, coalition)
    X = ds.features[test_idx]
    return predict(model, X) - ds.targets[test_idx]


# ---------------------------------------------------------------------------
# exact enumeration


def decompose_exact(
    spec: ModelSpec, ds: Dataset, split: SplitPlan, max_train: int = MAX_EXACT_TRAIN
) -> PhiMatrix:
    """Exact Shapley decomposition by full coalition enumeration.

    Every coalition value is computed exactly once into a dense 2^N table,
    then each training slot accumulates weighted marginals over the masks
    that exclude it.
    """
    split.validate_for(ds)
    train = list(split.train_indices)
    test = list(split.test_indices)
    n = len(train)
    if n < 1:
        raise EngineError("empty training split")
    if n > max_train:
        raise EngineError(
            f"exact enumeration is capped at {max_train} training rows, got {n}"
        )
    t0 = time.perf_counter()
    n_masks = 1 << n
    values = np.zeros((n_masks, len(test)), dtype=np.float64)
    for mask in range(1, n_masks):
        coalition = [train[b] for b in range(n) if mask >> b & 1]
        values[mask] = coalition_residuals(spec, ds, coalition, test)
    weights = [shapley_weight(n, s) for s in range(n)]
    phi = np.zeros((len(test), n), dtype=np.float64)
    for mask in range(n_masks):
        s = mask.bit_count()
        if s == n:
            continue
        w = weights[s]
        for j in range(n):
            if not mask >> j & 1:
                phi[:, j] += w * (values[mask | (1 << j)] - values[mask])
    residuals_full = values[n_masks - 1]
    meta = RunMeta(
        estimator="exact",
        seed=spec.fit_seed,
        permutations_used=0,
        truncation_tol=0.0,
        convergence_tol=0.0,
        converged=True,
        wall_time_seconds=time.perf_counter() - t0,
        model=spec.as_dict(),
    )
    return PhiMatrix(
        values=phi,
        residuals_full=residuals_full,
        train_ids=tuple(ds.ids[k] for k in train),
        test_ids=tuple(ds.ids[k] for k in test),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Monte Carlo permutation sampling


def permutation_for_index(n: int, seed: int, t: int) -> np.ndarray:
    """Training-slot order for permutation t: slot t mod n leads, the rest
    are shuffled by the substream keyed on (seed, t)."""
    first = t % n
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, t])
    rest = rng.permutation(n - 1)
    rest = np.where(rest >= first, rest + 1, rest)
    return np.concatenate(([first], rest)).astype(np.int64)


def _scan_permutation(
    perm: np.ndarray,
    value_fn: Callable[[tuple[int, ...]], np.ndarray],
    v_empty: np.ndarray,
    v_full: np.ndarray,
    truncation_tol: float,
) -> np.ndarray:
    """Marginal vectors for one permutation; rows indexed by training slot.

    The prefix scan stops (remaining marginals zero) once the prefix value
    is within truncation_tol of the full value in mean absolute distance.
    """
    n = perm.shape[0]
    marg = np.zeros((n, v_full.shape[0]), dtype=np.float64)
    prev = v_empty
    prefix: list[int] = []
    for j in perm:
        if truncation_tol > 0 and float(np.abs(prev - v_full).mean()) < truncation_tol:
            break
        prefix.append(int(j))
        cur = value_fn(tuple(sorted(prefix)))
        marg[j] = cur - prev
        prev = cur
    return marg


def montecarlo_shapley(
    value_fn: Callable[[tuple[int, ...]], np.ndarray],
    v_empty: np.ndarray,
    v_full: np.ndarray,
    n_players: int,
    max_permutations: int,
    convergence_tol: float,
    convergence_window: int,
    truncation_tol: float,
    seed: int,
    threads: int = 1,
) -> tuple[np.ndarray, int, bool]:
    """Generic truncated permutation-sampling Shapley estimate.

    Returns (estimates with shape (n_players, value_dim), permutations used,
    converged flag). Results are identical for any thread count: permutation
    t is a fixed function of (seed, t) and sums are reduced in ascending t.
    """
    window = min(convergence_window, max_permutations)
    # Convergence is measured relative to the game's total span; an exactly
    # degenerate game (full equals empty) falls back to an absolute scale.
    scale = float(np.abs(v_full - v_empty).mean())
    if scale == 0.0:
        scale = 1.0

    running = np.zeros((n_players, v_full.shape[0]), dtype=np.float64)
    snapshots: list[np.ndarray] = []  # estimate after each permutation
    used = 0
    converged = False

    def marginals(t: int) -> np.ndarray:
        perm = permutation_for_index(n_players, seed, t)
        return _scan_permutation(perm, value_fn, v_empty, v_full, truncation_tol)

    batch = max(8, 4 * threads)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        t = 0
        while t < max_permutations and not converged:
            hi = min(t + batch, max_permutations)
            if pool is not None:
                results = list(pool.map(marginals, range(t, hi)))
            else:
                results = [marginals(k) for k in range(t, hi)]
            for m in results:
                running += m
                used += 1
                estimate = running / used
                snapshots.append(estimate)
                if len(snapshots) > window + 1:
                    snapshots.pop(0)
                if convergence_tol > 0 and used > window:
                    delta = float(np.abs(estimate - snapshots[0]).mean())
                    if delta / scale < convergence_tol:
                        converged = True
                        break
            t = hi
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    return running / used, used, converged


def decompose_monte_carlo(
    spec: ModelSpec,
    ds: Dataset,
    split: SplitPlan,
    cfg: McConfig,
    cache_capacity: int | None = MC_CACHE_CAPACITY,
) -> PhiMatrix:
    """Truncated Monte Carlo permutation estimate of the decomposition."""
    split.validate_for(ds)
    train = list(split.train_indices)
    test = list(split.test_indices)
    n = len(train)
    if n < 1:
        raise EngineError("empty training split")
    t0 = time.perf_counter()

    max_perms = cfg.max_permutations if cfg.max_permutations is not None else 3 * n
    trunc = cfg.truncation_tol
    if trunc is None:
        trunc = 0.001 * float(np.sqrt(np.mean(ds.targets[train] ** 2)))

    cache = CoalitionCache(cache_capacity)

    def value_fn(key: tuple[int, ...]) -> np.ndarray:
        return cache.get_or_compute(
            key,
            lambda: coalition_residuals(spec, ds, [train[k] for k in key], test),
        )

    v_empty = np.zeros(len(test), dtype=np.float64)
    v_full = value_fn(tuple(range(n)))
    estimates, used, converged = montecarlo_shapley(
        value_fn,
        v_empty,
        v_full,
        n,
        max_permutations=max_perms,
        convergence_tol=cfg.convergence_tol,
        convergence_window=cfg.convergence_window,
        truncation_tol=trunc,
        seed=cfg.seed,
        threads=cfg.threads,
    )
    meta = RunMeta(
        estimator="monte_carlo",
        seed=cfg.seed,
        permutations_used=used,
        truncation_tol=trunc,
        convergence_tol=cfg.convergence_tol,
        converged=converged,
        wall_time_seconds=time.perf_counter() - t0,
        model=spec.as_dict(),
        extra={"max_permutations": max_perms},
    )
    return PhiMatrix(
        values=estimates.T.copy(),
        residuals_full=v_full.copy(),
        train_ids=tuple(ds.ids[k] for k in train),
        test_ids=tuple(ds.ids[k] for k in test),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# serialization

PHI_CSV_RESIDUAL_COLUMN = "residual_full"


def write_phi_csv(phi: PhiMatrix, path: str | Path) -> None:
    """Values matrix as CSV: header = training ids, first column = test ids,
    final column the full-model residuals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *phi.train_ids, PHI_CSV_RESIDUAL_COLUMN])
        for i, test_id in enumerate(phi.test_ids):
            writer.writerow(
                [
                    test_id,
                    *(repr(float(v)) for v in phi.values[i]),
                    repr(float(phi.residuals_full[i])),
                ]
            )


def write_meta_json(meta: RunMeta, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(meta.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_phi_csv(path: str | Path, meta_path: str | Path | None = None) -> PhiMatrix:
    """Load a PhiMatrix written by write_phi_csv; the JSON sidecar is used
    when present (pass meta_path to override the <stem>_meta.json default)."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 3:
        raise ValueError(f"{path}: not a phi matrix CSV")
    header = rows[0]
    if header[-1] != PHI_CSV_RESIDUAL_COLUMN:
        raise ValueError(f"{path}: last column must be {PHI_CSV_RESIDUAL_COLUMN!r}")
    train_ids = tuple(header[1:-1])
    test_ids = []
    values = []
    residuals = []
    for row in rows[1:]:
        test_ids.append(row[0])
        values.append([float(v) for v in row[1:-1]])
        residuals.append(float(row[-1]))
    if meta_path is None:
        candidate = path.with_name(path.stem + "_meta.json")
        meta_path = candidate if candidate.exists() else None
    if meta_path is not None:
        with open(meta_path) as fh:
            meta = RunMeta.from_dict(json.load(fh))
    else:
        meta = RunMeta(
            estimator="unknown",
            seed=0,
            permutations_used=0,
            truncation_tol=0.0,
            convergence_tol=0.0,
            converged=False,
            wall_time_seconds=0.0,
            model={},
        )
    return PhiMatrix(
        values=np.asarray(values, dtype=np.float64),
        residuals_full=np.asarray(residuals, dtype=np.float64),
        train_ids=train_ids,
        test_ids=tuple(test_ids),
        meta=meta,
    )
