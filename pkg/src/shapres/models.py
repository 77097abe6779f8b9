"""Regressors fit on index subsets: closed-form ridge, a bagged random
forest, and a constant model used as a test oracle.

All model randomness derives from fit_seed combined with a hash of the
sorted subset, so refitting the same coalition is bit-reproducible and the
result can be cached by coalition alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from shapres.dataio import Dataset

MODEL_KINDS = ("ridge", "forest", "constant")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative regressor description; only the fields for `kind` matter."""

    kind: str
    ridge_lambda: float = 1.0
    ridge_intercept: bool = True
    forest_trees: int = 100
    forest_min_leaf: int = 1
    forest_feature_fraction: float = 1.0 / 3.0
    constant_value: float = 0.0
    fit_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.kind == "ridge" and not self.ridge_lambda > 0:
            raise ValueError(f"ridge_lambda must be > 0, got {self.ridge_lambda}")
        if self.kind == "forest":
            if self.forest_trees < 1:
                raise ValueError(f"forest_trees must be >= 1, got {self.forest_trees}")
            if self.forest_min_leaf < 1:
                raise ValueError(f"forest_min_leaf must be >= 1, got {self.forest_min_leaf}")
            if not 0.0 < self.forest_feature_fraction <= 1.0:
                raise ValueError(
                    f"forest_feature_fraction must be in (0,1], got "
                    f"{self.forest_feature_fraction}"
                )

    def as_dict(self) -> dict:
        """JSON-friendly echo of the fields relevant to this kind."""
        out: dict = {"kind": self.kind, "fit_seed": self.fit_seed}
        if self.kind == "ridge":
            out["ridge_lambda"] = self.ridge_lambda
            out["ridge_intercept"] = self.ridge_intercept
        elif self.kind == "forest":
            out["forest_trees"] = self.forest_trees
            out["forest_min_leaf"] = self.forest_min_leaf
            out["forest_feature_fraction"] = self.forest_feature_fraction
        else:
            out["constant_value"] = self.constant_value
        return out


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A model fit on one training subset; predict() is pure and thread-safe."""

    spec: ModelSpec
    train_subset: tuple[int, ...]
    params: dict

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)


def subset_rng(fit_seed: int, subset: Sequence[int]) -> np.random.Generator:
    """Generator keyed by (fit_seed, sorted subset) only."""
    ordered = np.asarray(sorted(int(i) for i in subset), dtype=np.int64)
    digest = hashlib.blake2b(ordered.tobytes(), digest_size=16).digest()
    words = [int.from_bytes(digest[k : k + 8], "little") for k in (0, 8)]
    return np.random.default_rng([fit_seed & 0xFFFFFFFFFFFFFFFF, *words])


def fit(spec: ModelSpec, ds: Dataset, subset: Sequence[int]) -> FittedModel:
    """Fit spec on ds rows given by subset (non-empty, valid indices).

    The subset is treated as a multiset: index order never affects the fit,
    so coalition values are well defined.
    """
    idx = sorted(int(i) for i in subset)
    if not idx:
        raise ValueError("cannot fit on an empty subset; the empty coalition is the caller's job")
    if idx[0] < 0 or idx[-1] >= ds.n:
        raise ValueError(f"subset index out of range for dataset with {ds.n} rows")
    X = ds.features[idx]
    y = ds.targets[idx]
    if spec.kind == "ridge":
        params = _fit_ridge(X, y, spec.ridge_lambda, spec.ridge_intercept)
    elif spec.kind == "forest":
        params = _fit_forest(X, y, spec, subset_rng(spec.fit_seed, idx))
    else:
        params = {"value": float(spec.constant_value)}
    return FittedModel(spec=spec, train_subset=tuple(idx), params=params)


def predict(model: FittedModel, X: np.ndarray) -> np.ndarray:
    """Predictions for each row of X; X must have the training column count."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-dimensional, got shape {X.shape}")
    kind = model.spec.kind
    if kind == "constant":
        return np.full(X.shape[0], model.params["value"], dtype=np.float64)
    p = model.params["p"]
    if X.shape[1] != p:
        raise ValueError(f"X has {X.shape[1]} columns, model was fit with {p}")
    if kind == "ridge":
        return X @ model.params["theta"] + model.params["intercept"]
    preds = np.zeros(X.shape[0], dtype=np.float64)
    for tree in model.params["trees"]:
        preds += _predict_tree(tree, X)
    preds /= len(model.params["trees"])
    return preds


# ---------------------------------------------------------------------------
# ridge


def _fit_ridge(X: np.ndarray, y: np.ndarray, lam: float, intercept: bool) -> dict:
    p = X.shape[1]
    if intercept:
        x_mean = X.mean(axis=0)
        y_mean = float(y.mean())
    else:
        x_mean = np.zeros(p)
        y_mean = 0.0
    Xc = X - x_mean
    yc = y - y_mean
    A = Xc.T @ Xc + lam * np.eye(p)
    theta = np.linalg.solve(A, Xc.T @ yc)
    return {
        "p": p,
        "theta": theta,
        "intercept": y_mean - float(theta @ x_mean),
    }


# ---------------------------------------------------------------------------
# random forest

# A tree is nested dicts: {"f": col, "t": threshold, "lo": node, "hi": node}
# or a leaf {"v": mean}.


def _fit_forest(X: np.ndarray, y: np.ndarray, spec: ModelSpec, rng: np.random.Generator) -> dict:
    m, p = X.shape
    n_feats = max(1, int(np.ceil(p * spec.forest_feature_fraction)))
    trees = []
    for _ in range(spec.forest_trees):
        boot = rng.integers(0, m, size=m)
        trees.append(_grow_tree(X[boot], y[boot], spec.forest_min_leaf, n_feats, rng))
    return {"p": p, "trees": trees}


def _grow_tree(
    X: np.ndarray, y: np.ndarray, min_leaf: int, n_feats: int, rng: np.random.Generator
) -> dict:
    m = y.shape[0]
    if m < 2 * min_leaf or np.ptp(y) == 0.0:
        return {"v": float(y.mean())}
    split = _best_split(X, y, min_leaf, n_feats, rng)
    if split is None:
        return {"v": float(y.mean())}
    f, t = split
    lo = X[:, f] <= t
    return {
        "f": f,
        "t": t,
        "lo": _grow_tree(X[lo], y[lo], min_leaf, n_feats, rng),
        "hi": _grow_tree(X[~lo], y[~lo], min_leaf, n_feats, rng),
    }


def _best_split(
    X: np.ndarray, y: np.ndarray, min_leaf: int, n_feats: int, rng: np.random.Generator
) -> tuple[int, float] | None:
    """(feature, threshold) maximizing SSE reduction, or None if no legal split."""
    m, p = X.shape
    candidates = rng.choice(p, size=min(n_feats, p), replace=False)
    best: tuple[int, float] | None = None
    best_score = -np.inf
    total = y.sum()
    for f in candidates:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        csum = np.cumsum(ys)
        # Split after position k (1-based left size); both sides >= min_leaf
        # and the threshold must separate distinct feature values.
        for k in range(min_leaf, m - min_leaf + 1):
            if xs[k - 1] == xs[k]:
                continue
            left = csum[k - 1]
            score = left * left / k + (total - left) ** 2 / (m - k)
            if score > best_score:
                best_score = score
                best = (int(f), float(0.5 * (xs[k - 1] + xs[k])))
    return best


def _predict_tree(node: dict, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    _tree_fill(node, X, np.arange(X.shape[0]), out)
    return out


def _tree_fill(node: dict, X: np.ndarray, idx: np.ndarray, out: np.ndarray) -> None:
    if "v" in node:
        out[idx] = node["v"]
        return
    lo = X[idx, node["f"]] <= node["t"]
    if lo.any():
        _tree_fill(node["lo"], X, idx[lo], out)
    if not lo.all():
        _tree_fill(node["hi"], X, idx[~lo], out)
