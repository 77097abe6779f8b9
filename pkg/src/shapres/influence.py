"""First-order influence approximations of the decomposition for ridge.

Adding instance j to a fitted coalition S perturbs every test residual by
approximately -x_i^T A_S^{-1} x_j e_j^(S), where A_S is the penalized Gram
matrix of S and e_j^(S) the pre-update residual of j. The all-S algorithm
averages importance-weighted marginals over sampled coalitions; the
largest-S algorithm reads every marginal off the single full-data model
and is fast but violates additivity (rows need not sum to the residual).

Intercept handling: with the intercept enabled the state carries the
augmented (p+1)-dimensional representation [x, 1] with an unpenalized
intercept coordinate, which is the same estimator as the centered solve in
the models module and keeps the first-order update exact about the fitted
parameters, intercept shift included.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from shapres.dataio import Dataset, SplitPlan
from shapres.engine import PhiMatrix, RunMeta, coalition_residuals
from shapres.models import ModelSpec

GRAM_CHECK_TOL = 1e-8


class InfluenceError(RuntimeError):
    """Sampling failure, e.g. an instance absent from every drawn subset."""


@dataclass(frozen=True)
class InfluenceConfig:
    """All-S sampling configuration; subset_samples None means 2 * N_train."""

    subset_samples: int | None = None
    seed: int = 0
    threads: int = 1
    exact_singletons: bool = True

    def __post_init__(self) -> None:
        if self.subset_samples is not None and self.subset_samples < 1:
            raise ValueError(f"subset_samples must be >= 1, got {self.subset_samples}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True, eq=False)
class RidgeState:
    """Ridge solution on one coalition plus its inverse Gram matrix.

    beta stacks the coefficients with the intercept last when intercept
    mode is on; gram_inverse matches that augmented dimension.
    """

    gram_inverse: np.ndarray
    beta: np.ndarray
    subset: tuple[int, ...]
    ridge_lambda: float
    intercept: bool

    @classmethod
    def fit(
        cls,
        ds: Dataset,
        subset: Sequence[int],
        ridge_lambda: float,
        intercept: bool = True,
    ) -> "RidgeState":
        if not ridge_lambda > 0:
            raise ValueError(f"ridge_lambda must be > 0, got {ridge_lambda}")
        idx = sorted(int(i) for i in subset)
        if idx and (idx[0] < 0 or idx[-1] >= ds.n):
            raise ValueError(f"subset index out of range for dataset with {ds.n} rows")
        D = _design(ds.features[idx] if idx else np.empty((0, ds.p)), intercept)
        q = D.shape[1]
        penalty = np.eye(q) * ridge_lambda
        if intercept:
            penalty[-1, -1] = 0.0  # intercept unpenalized
        A = D.T @ D + penalty
        try:
            gram_inverse = np.linalg.inv(A)
        except np.linalg.LinAlgError:
            # Only the empty coalition with an intercept lands here: its
            # intercept row is all zero. pinv yields the zero solution.
            gram_inverse = np.linalg.pinv(A)
        else:
            gap = float(np.abs(A @ gram_inverse - np.eye(q)).max())
            if gap > GRAM_CHECK_TOL:
                raise InfluenceError(f"Gram inverse check failed: max deviation {gap:.3e}")
        y = ds.targets[idx] if idx else np.empty(0)
        beta = gram_inverse @ (D.T @ y)
        return cls(
            gram_inverse=gram_inverse,
            beta=beta,
            subset=tuple(idx),
            ridge_lambda=float(ridge_lambda),
            intercept=intercept,
        )

    def residuals(self, ds: Dataset, indices: Sequence[int]) -> np.ndarray:
        """Prediction minus target on the given dataset rows."""
        idx = [int(i) for i in indices]
        D = _design(ds.features[idx], self.intercept)
        return D @ self.beta - ds.targets[idx]


def _design(X: np.ndarray, intercept: bool) -> np.ndarray:
    if not intercept:
        return np.asarray(X, dtype=np.float64)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def influence_add_marginal(
    state: RidgeState, ds: Dataset, j: int, test_indices: Sequence[int]
) -> np.ndarray:
    """First-order estimate of v(S + {j}) - v(S) per test instance."""
    j = int(j)
    if j in state.subset:
        raise ValueError(f"instance {j} is already in the fitted subset")
    test_idx = [int(i) for i in test_indices]
    x_j = _design(ds.features[j : j + 1], state.intercept)[0]
    e_j = float(x_j @ state.beta - ds.targets[j])
    X_test = _design(ds.features[test_idx], state.intercept)
    return -(X_test @ (state.gram_inverse @ x_j)) * e_j


def _marginals_for_subset(
    state: RidgeState,
    ds: Dataset,
    absent_rows: Sequence[int],
    test_rows: Sequence[int],
) -> np.ndarray:
    """Influence marginals for every absent instance at once: (n_test, n_absent)."""
    X_out = _design(ds.features[list(absent_rows)], state.intercept)
    e_out = X_out @ state.beta - ds.targets[list(absent_rows)]
    X_test = _design(ds.features[list(test_rows)], state.intercept)
    return -(X_test @ (state.gram_inverse @ X_out.T)) * e_out[None, :]


def decompose_all_s(
    ds: Dataset,
    split: SplitPlan,
    ridge_lambda: float,
    cfg: InfluenceConfig,
    intercept: bool = True,
    fit_seed: int = 0,
) -> PhiMatrix:
    """All-S influence decomposition.

    Each sample draws a coalition size k uniform on {0..N-1} and a uniform
    size-k subset, fits ridge once, and records influence marginals for
    every absent instance with importance weight (N+1)/(2(N-k)), the
    correction from uniform-size subset sampling to the permutation-prefix
    distribution. Per-instance estimates are self-normalized weighted
    means. k=0 marginals are exact singleton fits by default (a first-order
    expansion cannot represent the jump from the zero-valued empty
    coalition).
    """
    split.validate_for(ds)
    train = list(split.train_indices)
    test = list(split.test_indices)
    n = len(train)
    if n < 1:
        raise InfluenceError("empty training split")
    t0 = time.perf_counter()
    n_samples = cfg.subset_samples if cfg.subset_samples is not None else 2 * n
    spec = ModelSpec(
        kind="ridge", ridge_lambda=ridge_lambda, ridge_intercept=intercept, fit_seed=fit_seed
    )

    singleton_cache: dict[int, np.ndarray] = {}

    def singleton_value(pos: int) -> np.ndarray:
        if pos not in singleton_cache:
            singleton_cache[pos] = coalition_residuals(spec, ds, [train[pos]], test)
        return singleton_cache[pos]

    def sample_result(t: int) -> tuple[np.ndarray, np.ndarray, float]:
        """(absent positions, marginal matrix (n_test, n_absent), weight) for draw t."""
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, t])
        k = int(rng.integers(0, n))
        positions = np.sort(rng.choice(n, size=k, replace=False)) if k else np.empty(0, int)
        weight = (n + 1) / (2.0 * (n - k))
        absent = np.setdiff1d(np.arange(n), positions, assume_unique=True)
        if k == 0 and cfg.exact_singletons:
            marg = np.column_stack([singleton_value(int(pos)) for pos in absent])
            return absent, marg, weight
        state = RidgeState.fit(ds, [train[int(p)] for p in positions], ridge_lambda, intercept)
        marg = _marginals_for_subset(
            state, ds, [train[int(p)] for p in absent], test
        )
        return absent, marg, weight

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(sample_result, range(n_samples)))
    else:
        results = [sample_result(t) for t in range(n_samples)]

    # Fixed-order reduction keeps the result independent of scheduling.
    acc = np.zeros((len(test), n), dtype=np.float64)
    wsum = np.zeros(n, dtype=np.float64)
    for absent, marg, weight in results:
        acc[:, absent] += weight * marg
        wsum[absent] += weight
    missing = np.flatnonzero(wsum == 0)
    if missing.size:
        raise InfluenceError(
            f"training rows {[train[int(m)] for m in missing]} were never absent "
            f"from a sampled coalition, so no marginal was recorded; "
            f"increase subset_samples (got {n_samples})"
        )
    phi = acc / wsum[None, :]

    residuals_full = coalition_residuals(spec, ds, train, test)
    meta = RunMeta(
        estimator="influence_all_s",
        seed=cfg.seed,
        permutations_used=0,
        truncation_tol=0.0,
        convergence_tol=0.0,
        converged=True,
        wall_time_seconds=time.perf_counter() - t0,
        model=spec.as_dict(),
        extra={
            "subset_samples": n_samples,
            "exact_singletons": cfg.exact_singletons,
        },
    )
    return PhiMatrix(
        values=phi,
        residuals_full=residuals_full,
        train_ids=tuple(ds.ids[k] for k in train),
        test_ids=tuple(ds.ids[k] for k in test),
        meta=meta,
    )


def decompose_largest_s(
    ds: Dataset,
    split: SplitPlan,
    ridge_lambda: float,
    intercept: bool = True,
    fit_seed: int = 0,
) -> PhiMatrix:
    """Largest-S influence decomposition: one full-data fit, every phi[i][j]
    read off as the first-order marginal of j joining everyone else. Fast;
    additivity is knowingly violated (meta flags it)."""
    split.validate_for(ds)
    train = list(split.train_indices)
    test = list(split.test_indices)
    if not train:
        raise InfluenceError("empty training split")
    t0 = time.perf_counter()
    state = RidgeState.fit(ds, train, ridge_lambda, intercept)
    X_train = _design(ds.features[train], intercept)
    e_train = X_train @ state.beta - ds.targets[train]
    X_test = _design(ds.features[test], intercept)
    phi = -(X_test @ (state.gram_inverse @ X_train.T)) * e_train[None, :]

    spec = ModelSpec(
        kind="ridge", ridge_lambda=ridge_lambda, ridge_intercept=intercept, fit_seed=fit_seed
    )
    residuals_full = coalition_residuals(spec, ds, train, test)
    meta = RunMeta(
        estimator="influence_largest_s",
        seed=fit_seed,
        permutations_used=0,
        truncation_tol=0.0,
        convergence_tol=0.0,
        converged=True,
        wall_time_seconds=time.perf_counter() - t0,
        model=spec.as_dict(),
        extra={"additivity_violated": True},
    )
    return PhiMatrix(
        values=phi,
        residuals_full=residuals_full,
        train_ids=tuple(ds.ids[k] for k in train),
        test_ids=tuple(ds.ids[k] for k in test),
        meta=meta,
    )
