"""Kernel-weighted least-squares estimator of the decomposition.

Adapts the KernelSHAP idea to training instances: coalition masks are
scored by the Shapley kernel, and per-test-instance values are recovered
by a weighted least-squares fit with the base value pinned to zero (no
intercept column) and the efficiency constraint folded in by eliminating
one coefficient. One design factorization serves every test instance.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import lgamma, log
from typing import Sequence

import numpy as np

from shapres.dataio import Dataset, SplitPlan
from shapres.engine import PhiMatrix, RunMeta, coalition_residuals
from shapres.models import ModelSpec


class KernelSingularError(RuntimeError):
    """Sampled masks do not span the coefficient space; increase the budget."""


@dataclass
class MaskSample:
    """One coalition mask with its WLS weight and (optional) valuation.

    Under full enumeration the weight is the Shapley kernel weight of the
    mask's size; under sampling (mask draws proportional to kernel mass)
    the weight is the draw multiplicity.
    """

    mask: np.ndarray
    weight: float
    value: np.ndarray | None = None

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=bool)
        size = int(mask.sum())
        if size == 0 or size == mask.shape[0]:
            raise ValueError("mask must be neither empty nor full")
        if not self.weight > 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")
        self.mask = mask


def kernel_weight(M: int, s: int) -> float:
    """Shapley kernel (M-1) / (binom(M,s) * s * (M-s)) for 1 <= s <= M-1."""
    if not 1 <= s <= M - 1:
        raise ValueError(f"coalition size {s} out of range [1, {M - 1}]")
    log_binom = lgamma(M + 1) - lgamma(s + 1) - lgamma(M - s + 1)
    return float(np.exp(log(M - 1) - log_binom - log(s) - log(M - s)))


def sample_coalitions(N: int, budget: int, seed: int) -> list[MaskSample]:
    """Coalition masks for the WLS design.

    budget >= 2^N - 2 returns the full enumeration with exact kernel
    weights. Otherwise budget // 2 masks are drawn with size probability
    proportional to (N-1)/(s(N-s)) and uniform membership within the size;
    each draw also contributes its complement, and duplicates merge into a
    single MaskSample with summed multiplicity.
    """
    if budget < 2:
        raise ValueError(f"budget must be >= 2, got {budget}")
    if N < 2:
        return []
    if budget >= (1 << N) - 2:
        out = []
        for s in range(1, N):
            w = kernel_weight(N, s)
            for members in itertools.combinations(range(N), s):
                mask = np.zeros(N, dtype=bool)
                mask[list(members)] = True
                out.append(MaskSample(mask=mask, weight=w))
        return out

    sizes = np.arange(1, N)
    pmf = (N - 1) / (sizes * (N - sizes))
    pmf = pmf / pmf.sum()
    rng = np.random.default_rng(seed)
    merged: dict[bytes, MaskSample] = {}

    def add(mask: np.ndarray) -> None:
        key = np.packbits(mask).tobytes()
        hit = merged.get(key)
        if hit is None:
            merged[key] = MaskSample(mask=mask, weight=1.0)
        else:
            hit.weight += 1.0

    for _ in range(budget // 2):
        s = int(rng.choice(sizes, p=pmf))
        members = rng.choice(N, size=s, replace=False)
        mask = np.zeros(N, dtype=bool)
        mask[members] = True
        add(mask)
        add(~mask)
    return list(merged.values())


def decompose_kernel(
    spec: ModelSpec,
    ds: Dataset,
    split: SplitPlan,
    budget: int,
    seed: int = 0,
    threads: int = 1,
) -> PhiMatrix:
    """Kernel WLS estimate of the decomposition.

    Efficiency holds by construction for every row: one coefficient is
    eliminated through sum_j phi[i][j] = residual_full[i], and the reduced
    unconstrained system is solved by least squares for all test instances
    at once. A rank-deficient design raises KernelSingularError.
    """
    split.validate_for(ds)
    train = list(split.train_indices)
    test = list(split.test_indices)
    n = len(train)
    if n < 1:
        raise ValueError("empty training split")
    if budget < n:
        raise ValueError(f"budget {budget} below N_train={n} degrees of freedom")
    t0 = time.perf_counter()
    v_full = coalition_residuals(spec, ds, train, test)

    enumerated = budget >= (1 << n) - 2
    samples = sample_coalitions(n, budget, seed) if n >= 2 else []

    if n == 1:
        phi = v_full[:, None].copy()
    else:
        def valuation(sample: MaskSample) -> np.ndarray:
            coalition = [train[k] for k in np.flatnonzero(sample.mask)]
            return coalition_residuals(spec, ds, coalition, test)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                values = list(pool.map(valuation, samples))
        else:
            values = [valuation(s) for s in samples]
        for sample, value in zip(samples, values):
            sample.value = value

        Z = np.array([s.mask for s in samples], dtype=np.float64)
        w = np.array([s.weight for s in samples], dtype=np.float64)
        V = np.array(values, dtype=np.float64)
        if Z.shape[0] < n - 1:
            raise KernelSingularError(
                f"{Z.shape[0]} distinct masks cannot determine {n - 1} free coefficients"
            )
        # Eliminate the last coefficient via the efficiency constraint.
        A = Z[:, : n - 1] - Z[:, n - 1 :]
        B = V - np.outer(Z[:, n - 1], v_full)
        sw = np.sqrt(w)[:, None]
        sol, _, rank, _ = np.linalg.lstsq(A * sw, B * sw, rcond=None)
        if rank < n - 1:
            raise KernelSingularError(
                f"mask design rank {rank} < {n - 1}; sampled masks do not span"
            )
        phi_head = sol
        phi_last = v_full - phi_head.sum(axis=0)
        phi = np.concatenate([phi_head, phi_last[None, :]], axis=0).T

    meta = RunMeta(
        estimator="kernel",
        seed=seed,
        permutations_used=0,
        truncation_tol=0.0,
        convergence_tol=0.0,
        converged=True,
        wall_time_seconds=time.perf_counter() - t0,
        model=spec.as_dict(),
        extra={
            "budget": budget,
            "masks_evaluated": len(samples),
            "enumerated": enumerated,
        },
    )
    return PhiMatrix(
        values=phi,
        residuals_full=v_full.copy(),
        train_ids=tuple(ds.ids[k] for k in train),
        test_ids=tuple(ds.ids[k] for k in test),
        meta=meta,
    )
