"""Derived products over a decomposition: contribution normalization, CC
summaries, force-plot data, isolation-forest outliers, valuation scores,
Data Shapley comparison, ablation curves, and the accuracy metric.

Sign convention: a residual-shrinking effect is positive. phi^c[i][j] =
-sgn(e_i) * phi[i][j] with sgn(0) := +1, so pushing a positive residual
down (or a negative residual up) counts as a positive contribution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from shapres.dataio import Dataset, SplitPlan
from shapres.engine import (
    McConfig,
    PhiMatrix,
    RunMeta,
    CoalitionCache,
    MC_CACHE_CAPACITY,
    montecarlo_shapley,
)
from shapres.models import ModelSpec, fit, predict

EULER_GAMMA = 0.5772156649


@dataclass(frozen=True, eq=False)
class ContributionMatrix:
    """Sign-normalized decomposition phi^c; same shape and ids as its source."""

    values: np.ndarray
    residuals_full: np.ndarray
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    source: RunMeta


def normalize_contribution(phi: PhiMatrix) -> ContributionMatrix:
    """phi^c[i][j] = -sgn(e_i) * phi[i][j], sgn(0) := +1."""
    sign = np.where(phi.residuals_full >= 0.0, 1.0, -1.0)
    return ContributionMatrix(
        values=-sign[:, None] * phi.values,
        residuals_full=phi.residuals_full.copy(),
        train_ids=phi.train_ids,
        test_ids=phi.test_ids,
        source=phi.meta,
    )


# ---------------------------------------------------------------------------
# CC summaries


@dataclass(frozen=True)
class CCSummary:
    """Per-instance summary feeding CC plots.

    Symmetric runs fill every field. Asymmetric runs emit training rows
    (contribution stats, composition fields None) and test rows
    (composition stats, contribution fields None); self_contribution only
    exists in the symmetric case.
    """

    id: str
    target: float | None
    contribution_mean: float | None
    contribution_var: float | None
    composition_mean: float | None
    composition_var: float | None
    self_contribution: float | None


def cc_summary(
    phi: PhiMatrix,
    phi_c: ContributionMatrix,
    split: SplitPlan | None = None,
    targets: Mapping[str, float] | None = None,
) -> list[CCSummary]:
    """Contribution stats over phi^c columns, composition stats over phi rows.

    `targets` maps instance id to target value for plot coloring; omitted
    ids get None. Symmetric is taken from the split when given, else
    inferred from the id vectors.
    """
    if phi.values.shape != phi_c.values.shape:
        raise ValueError("phi and phi_c shapes differ")
    symmetric = split.symmetric if split is not None else phi.train_ids == phi.test_ids

    def target_of(rid: str) -> float | None:
        if targets is None:
            return None
        value = targets.get(rid)
        return None if value is None else float(value)

    out: list[CCSummary] = []
    if symmetric:
        for k, rid in enumerate(phi.train_ids):
            col = phi_c.values[:, k]
            row = phi.values[k, :]
            out.append(
                CCSummary(
                    id=rid,
                    target=target_of(rid),
                    contribution_mean=float(col.mean()),
                    contribution_var=float(col.var()),
                    composition_mean=float(row.mean()),
                    composition_var=float(row.var()),
                    self_contribution=float(phi_c.values[k, k]),
                )
            )
        return out
    for k, rid in enumerate(phi.train_ids):
        col = phi_c.values[:, k]
        out.append(
            CCSummary(
                id=rid,
                target=target_of(rid),
                contribution_mean=float(col.mean()),
                contribution_var=float(col.var()),
                composition_mean=None,
                composition_var=None,
                self_contribution=None,
            )
        )
    for i, rid in enumerate(phi.test_ids):
        row = phi.values[i, :]
        out.append(
            CCSummary(
                id=rid,
                target=target_of(rid),
                contribution_mean=None,
                contribution_var=None,
                composition_mean=float(row.mean()),
                composition_var=float(row.var()),
                self_contribution=None,
            )
        )
    return out


CC_CSV_COLUMNS = (
    "id",
    "target",
    "contribution_mean",
    "contribution_var",
    "composition_mean",
    "composition_var",
    "self_contribution",
)


def write_cc_csv(rows: Sequence[CCSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CC_CSV_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.id,
                    *(
                        "" if v is None else repr(float(v))
                        for v in (
                            row.target,
                            row.contribution_mean,
                            row.contribution_var,
                            row.composition_mean,
                            row.composition_var,
                            row.self_contribution,
                        )
                    ),
                ]
            )


# ---------------------------------------------------------------------------
# force plots


@dataclass(frozen=True)
class ForceSegment:
    train_id: str
    value: float
    cumulative: float
    color_key: float


@dataclass(frozen=True)
class ForceData:
    """One residual's decomposition ordered for stacked-bar rendering:
    positives by descending magnitude, then negatives by descending
    magnitude; cumulative sums run from 0 to e_i."""

    test_id: str
    base: float
    final: float
    segments: tuple[ForceSegment, ...]

    def as_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "base": self.base,
            "final": self.final,
            "segments": [
                {
                    "train_id": s.train_id,
                    "value": s.value,
                    "cumulative": s.cumulative,
                    "color_key": s.color_key,
                }
                for s in self.segments
            ],
        }


def force_segments(
    phi: PhiMatrix, test_id: str, train_targets: Mapping[str, float] | None = None
) -> ForceData:
    """Ordered segment data for one test instance's force plot.

    train_targets supplies the per-segment color key (training target);
    without it color keys are 0.
    """
    try:
        i = phi.test_ids.index(test_id)
    except ValueError:
        raise ValueError(f"unknown test id {test_id!r}") from None
    row = phi.values[i]
    order = sorted(range(len(row)), key=lambda j: (row[j] < 0, -abs(row[j]), j))
    segments = []
    cum = 0.0
    for j in order:
        cum += float(row[j])
        rid = phi.train_ids[j]
        color = 0.0
        if train_targets is not None and rid in train_targets:
            color = float(train_targets[rid])
        segments.append(
            ForceSegment(train_id=rid, value=float(row[j]), cumulative=cum, color_key=color)
        )
    return ForceData(
        test_id=test_id,
        base=0.0,
        final=float(phi.residuals_full[i]),
        segments=tuple(segments),
    )


# ---------------------------------------------------------------------------
# isolation forest

IFOREST_TREES = 100


def _harmonic_approx(m: int) -> float:
    return math.log(m) + EULER_GAMMA


def _c_factor(m: int) -> float:
    """Expected isolation path length of a subsample of size m."""
    if m <= 1:
        return 0.0
    return 2.0 * _harmonic_approx(m - 1) - 2.0 * (m - 1) / m


def _grow_itree(
    X: np.ndarray, rng: np.random.Generator, depth: int, limit: int
) -> dict:
    m = X.shape[0]
    if m <= 1 or depth >= limit:
        return {"size": m}
    spread = X.max(axis=0) - X.min(axis=0)
    candidates = np.flatnonzero(spread > 0)
    if candidates.size == 0:
        return {"size": m}
    f = int(candidates[rng.integers(candidates.size)])
    lo = float(X[:, f].min())
    hi = float(X[:, f].max())
    split = float(rng.uniform(lo, hi))
    left = X[:, f] < split
    return {
        "f": f,
        "t": split,
        "lo": _grow_itree(X[left], rng, depth + 1, limit),
        "hi": _grow_itree(X[~left], rng, depth + 1, limit),
    }


def _itree_depths(node: dict, X: np.ndarray, idx: np.ndarray, depth: int, out: np.ndarray) -> None:
    if "size" in node:
        out[idx] = depth + _c_factor(node["size"])
        return
    left = X[idx, node["f"]] < node["t"]
    if left.any():
        _itree_depths(node["lo"], X, idx[left], depth + 1, out)
    if not left.all():
        _itree_depths(node["hi"], X, idx[~left], depth + 1, out)


def iforest_scores(points: np.ndarray, seed: int, trees: int = IFOREST_TREES) -> np.ndarray:
    """Isolation-forest anomaly score per row: 2^(-E[path]/c(psi)),
    psi = min(256, n). Scores lie in (0, 1); deterministic given seed."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"points must be 2-dimensional, got shape {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 points, got {n}")
    psi = min(256, n)
    limit = math.ceil(math.log2(psi))
    rng = np.random.default_rng(seed)
    depth_sum = np.zeros(n, dtype=np.float64)
    all_rows = np.arange(n)
    for _ in range(trees):
        sample = rng.choice(n, size=psi, replace=False)
        tree = _grow_itree(X[sample], rng, 0, limit)
        depths = np.empty(n, dtype=np.float64)
        _itree_depths(tree, X, all_rows, 0, depths)
        depth_sum += depths
    mean_depth = depth_sum / trees
    return np.power(2.0, -mean_depth / _c_factor(psi))


@dataclass(frozen=True)
class OutlierReport:
    """Flagged training ids per requested mode; unrequested modes are None.
    Ids appear in descending score order (ties broken by ascending id)."""

    behavior: tuple[str, ...] | None = None
    features: tuple[str, ...] | None = None
    both: tuple[str, ...] | None = None
    behavior_scores: dict[str, float] | None = None
    feature_scores: dict[str, float] | None = None


def behavioral_outliers(
    phi_c: ContributionMatrix,
    ds: Dataset,
    mode: str,
    contamination: float,
    seed: int,
) -> OutlierReport:
    """Isolation-forest flags over behavior space (phi^c columns: each
    training instance as a point in N_test dimensions), raw feature space,
    or both plus their intersection. Flag count = max(1, floor(contamination * n))."""
    if mode not in ("behavior", "features", "both"):
        raise ValueError(f"mode must be behavior|features|both, got {mode!r}")
    if not 0.0 < contamination <= 0.5:
        raise ValueError(f"contamination must be in (0, 0.5], got {contamination}")
    ids = phi_c.train_ids
    count = max(1, int(math.floor(contamination * len(ids))))

    def top(scores: np.ndarray) -> tuple[str, ...]:
        order = sorted(range(len(ids)), key=lambda k: (-scores[k], ids[k]))
        return tuple(ids[k] for k in order[:count])

    behavior = features = both = None
    behavior_scores = feature_scores = None
    if mode in ("behavior", "both"):
        pts = phi_c.values.T
        scores = iforest_scores(pts, seed)
        behavior = top(scores)
        behavior_scores = {rid: float(s) for rid, s in zip(ids, scores)}
    if mode in ("features", "both"):
        rows = [ds.index_of(rid) for rid in ids]
        scores = iforest_scores(ds.features[rows], seed)
        features = top(scores)
        feature_scores = {rid: float(s) for rid, s in zip(ids, scores)}
    if mode == "both":
        both = tuple(sorted(set(behavior) & set(features)))
    return OutlierReport(
        behavior=behavior,
        features=features,
        both=both,
        behavior_scores=behavior_scores,
        feature_scores=feature_scores,
    )


# ---------------------------------------------------------------------------
# valuation and ablation


def contribution_value(phi_c: ContributionMatrix, kind: str = "mean_sq") -> np.ndarray:
    """Per-training-instance scalar value from phi^c columns.

    mean_sq (default) averages squared contributions; sq_mean squares the
    average. Both readings of the summary statistic exist in the wild, so
    both are shipped behind the flag.
    """
    if kind == "mean_sq":
        return np.mean(phi_c.values**2, axis=0)
    if kind == "sq_mean":
        return np.mean(phi_c.values, axis=0) ** 2
    raise ValueError(f"kind must be mean_sq|sq_mean, got {kind!r}")


def data_shapley_values(
    spec: ModelSpec,
    ds: Dataset,
    split: SplitPlan,
    cfg: McConfig,
    cache_capacity: int | None = MC_CACHE_CAPACITY,
) -> np.ndarray:
    """Data Shapley values of the scalar game v(S) = -MSE_test(f_S), with
    the empty coalition worth the zero-predictor loss -mean(y_test^2);
    estimated by the same truncated permutation sampler as the residual
    decomposition. One value per training instance."""
    split.validate_for(ds)
    train = list(split.train_indices)
    test = list(split.test_indices)
    n = len(train)
    if n < 1:
        raise ValueError("empty training split")
    y_test = ds.targets[test]
    X_test = ds.features[test]
    cache = CoalitionCache(cache_capacity)

    def game(key: tuple[int, ...]) -> np.ndarray:
        def compute() -> np.ndarray:
            model = fit(spec, ds, [train[k] for k in key])
            preds = predict(model, X_test)
            return np.array([-float(np.mean((preds - y_test) ** 2))])

        return cache.get_or_compute(key, compute)

    v_empty = np.array([-float(np.mean(y_test**2))])
    v_full = game(tuple(range(n)))
    max_perms = cfg.max_permutations if cfg.max_permutations is not None else 3 * n
    trunc = cfg.truncation_tol
    if trunc is None:
        trunc = 0.001 * float(np.sqrt(np.mean(ds.targets[train] ** 2)))
    estimates, _, _ = montecarlo_shapley(
        game,
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
    return estimates[:, 0]


@dataclass(frozen=True)
class AblationCurve:
    """Test MSE as training instances are removed; rows = (removed, mse)."""

    direction: str
    rows: tuple[tuple[int, float], ...]


def ablation_curve(
    spec: ModelSpec,
    ds: Dataset,
    split: SplitPlan,
    ranking: Sequence[float],
    direction: str,
    steps: int,
    seeds: Sequence[int] = tuple(range(10)),
) -> AblationCurve:
    """Remove instances one at a time in ranking order and refit.

    remove_high drops the largest-ranked first, remove_low the smallest;
    random ignores the ranking and reports the mean curve over `seeds`
    shuffles. steps must leave a non-empty remainder.
    """
    split.validate_for(ds)
    train = list(split.train_indices)
    test = list(split.test_indices)
    n = len(train)
    if direction not in ("remove_high", "remove_low", "random"):
        raise ValueError(f"direction must be remove_high|remove_low|random, got {direction!r}")
    if not 0 <= steps <= n - 1:
        raise ValueError(f"steps must leave a non-empty remainder: 0 <= steps <= {n - 1}")
    ranking = np.asarray(ranking, dtype=np.float64)
    if direction != "random" and ranking.shape != (n,):
        raise ValueError(f"ranking must have length {n}, got shape {ranking.shape}")
    X_test = ds.features[test]
    y_test = ds.targets[test]

    def curve_for(order: np.ndarray) -> np.ndarray:
        mses = np.empty(steps + 1)
        for r in range(steps + 1):
            keep = [train[k] for k in range(n) if k not in set(order[:r])]
            model = fit(spec, ds, keep)
            preds = predict(model, X_test)
            mses[r] = float(np.mean((preds - y_test) ** 2))
        return mses

    if direction == "remove_high":
        mses = curve_for(np.argsort(-ranking, kind="stable"))
    elif direction == "remove_low":
        mses = curve_for(np.argsort(ranking, kind="stable"))
    else:
        if not seeds:
            raise ValueError("random direction needs at least one seed")
        total = np.zeros(steps + 1)
        for s in seeds:
            total += curve_for(np.random.default_rng(int(s)).permutation(n))
        mses = total / len(seeds)
    rows = tuple((r, float(mses[r])) for r in range(steps + 1))
    return AblationCurve(direction=direction, rows=rows)


ABLATION_CSV_COLUMNS = ("removed", "mse", "direction", "ranking_name")


def write_ablation_csv(
    curves: Sequence[tuple[AblationCurve, str]], path: str | Path
) -> None:
    """Curves as (curve, ranking_name) pairs into one fixed-order CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_CSV_COLUMNS)
        for curve, ranking_name in curves:
            for removed, mse in curve.rows:
                writer.writerow([removed, repr(mse), curve.direction, ranking_name])


def decomposition_accuracy(phi: PhiMatrix) -> tuple[np.ndarray, float, float]:
    """Per-row |e_i - sum_j phi[i][j]| plus its mean and max."""
    err = np.abs(phi.residuals_full - phi.values.sum(axis=1))
    return err, float(err.mean()), float(err.max())
