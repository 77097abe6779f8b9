"""Per-instance residual decomposition for regression models.

shapres attributes each test residual of a fitted regression model to the
individual training instances that produced it, using Shapley values over
training coalitions. The package provides exact enumeration, truncated
Monte Carlo permutation sampling, a kernel-weighted least-squares
estimator, and fast influence-function approximations for ridge, together
with analysis tools (contribution/composition summaries, force layouts,
behavioral outlier detection, ablation curves) and a deterministic CLI.
"""

from shapres.dataio import Dataset, SplitPlan, load_csv, make_split, synthesize_linear
from shapres.engine import (
    McConfig,
    PhiMatrix,
    RunMeta,
    decompose_exact,
    decompose_monte_carlo,
)
from shapres.influence import decompose_all_s, decompose_largest_s
from shapres.kernel import decompose_kernel
from shapres.models import FittedModel, ModelSpec, fit, predict

__all__ = [
    "Dataset",
    "SplitPlan",
    "load_csv",
    "make_split",
    "synthesize_linear",
    "ModelSpec",
    "FittedModel",
    "fit",
    "predict",
    "McConfig",
    "PhiMatrix",
    "RunMeta",
    "decompose_exact",
    "decompose_monte_carlo",
    "decompose_kernel",
    "decompose_all_s",
    "decompose_largest_s",
]

__version__ = "0.1.0"
