"""Shared fixtures and independently coded oracles.

The oracles here deliberately avoid the library's own code paths: the
brute-force Shapley sum enumerates subsets directly from the defining
formula, the ridge oracle runs gradient descent on the penalized
objective, and the rank-one refit oracle solves the updated system from
scratch. Tests freeze values from these, never from the implementation.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from shapres.dataio import Dataset, SplitPlan, make_split, synthesize_linear
from shapres.engine import coalition_residuals
from shapres.models import ModelSpec


def brute_force_phi(spec: ModelSpec, ds: Dataset, split: SplitPlan) -> np.ndarray:
    """Shapley values straight from the defining sum over subsets:
    phi_j = sum_{S subseteq train minus j} |S|!(N-|S|-1)!/N! (v(S+j) - v(S))."""
    train = list(split.train_indices)
    test = list(split.test_indices)
    n = len(train)
    phi = np.zeros((len(test), n))
    for j in range(n):
        others = [k for k in range(n) if k != j]
        for size in range(n):
            weight = (
                math.factorial(size) * math.factorial(n - size - 1) / math.factorial(n)
            )
            for subset in itertools.combinations(others, size):
                with_j = coalition_residuals(
                    spec, ds, [train[k] for k in (*subset, j)], test
                )
                without = coalition_residuals(spec, ds, [train[k] for k in subset], test)
                phi[:, j] += weight * (with_j - without)
    return phi


def ridge_gd_oracle(
    X: np.ndarray, y: np.ndarray, lam: float, intercept: bool, steps: int = 200_000
) -> tuple[np.ndarray, float]:
    """Gradient descent on the penalized least-squares objective."""
    if intercept:
        xm, ym = X.mean(axis=0), float(y.mean())
    else:
        xm, ym = np.zeros(X.shape[1]), 0.0
    Xc, yc = X - xm, y - ym
    theta = np.zeros(X.shape[1])
    lr = 1.0 / (2 * (np.linalg.norm(Xc, 2) ** 2 + lam))
    for _ in range(steps):
        grad = 2 * Xc.T @ (Xc @ theta - yc) + 2 * lam * theta
        theta = theta - lr * grad
    return theta, ym - float(theta @ xm)


def ridge_refit_residuals(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_eval: np.ndarray,
    lam: float,
    intercept: bool,
) -> np.ndarray:
    """Independent ridge solve + evaluation residual helper (no shapres code)."""
    if intercept:
        D = np.hstack([X_train, np.ones((X_train.shape[0], 1))])
        E = np.hstack([X_eval, np.ones((X_eval.shape[0], 1))])
        pen = np.diag([lam] * X_train.shape[1] + [0.0])
    else:
        D, E = X_train, X_eval
        pen = lam * np.eye(X_train.shape[1])
    beta = np.linalg.solve(D.T @ D + pen, D.T @ y_train)
    return E @ beta


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation via average ranks (independent of scipy)."""

    def ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        # average ties
        for value in np.unique(v):
            mask = v == value
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    ra, rb = ranks(np.asarray(a, float)), ranks(np.asarray(b, float))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    return float((ra * rb).sum() / denom) if denom else 0.0


@pytest.fixture
def small_ridge_problem() -> tuple[ModelSpec, Dataset, SplitPlan]:
    ds = synthesize_linear(5, 2, 0.1, seed=42)
    split = make_split(ds, 0.0, 0, True)
    spec = ModelSpec(kind="ridge", ridge_lambda=1.0, fit_seed=3)
    return spec, ds, split


@pytest.fixture
def constant_two_row() -> tuple[ModelSpec, Dataset, SplitPlan]:
    ds = Dataset(
        features=np.array([[0.0], [1.0]]),
        targets=np.array([2.0, 4.0]),
        ids=("0", "1"),
    )
    split = make_split(ds, 0.0, 0, True)
    return ModelSpec(kind="constant", constant_value=0.0), ds, split
