"""Command-line interface.

Subcommands: decompose, cc, force, outliers, ablate, compare. All
randomness flows from --seed; submodule seeds are derived by hashing
(seed, purpose label), so reruns with identical flags produce
byte-identical artifacts regardless of --threads. Config precedence:
flags > --config JSON > built-in defaults; the effective configuration is
echoed into every meta JSON.

Exit codes: 0 success, 1 generic failure, 2 usage/compatibility, 3 IO.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from shapres import analysis, svgplot
from shapres.dataio import CsvFormatError, Dataset, SplitPlan, load_csv, make_split
from shapres.engine import (
    McConfig,
    PhiMatrix,
    decompose_exact,
    decompose_monte_carlo,
    read_phi_csv,
    write_meta_json,
    write_phi_csv,
)
from shapres.influence import InfluenceConfig, decompose_all_s, decompose_largest_s
from shapres.kernel import decompose_kernel
from shapres.models import ModelSpec

ESTIMATORS = ("exact", "mc", "kernel", "influence-all", "influence-largest")


class CompatibilityError(ValueError):
    """Flag combinations or file contents that cannot work together."""


def derive_seed(seed: int, label: str) -> int:
    """Stable submodule seed from the root seed and a purpose label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


DEFAULTS: dict = {
    "id_column": None,
    "model": "ridge",
    "ridge_lambda": 1.0,
    "trees": 100,
    "estimator": "exact",
    "symmetric": None,
    "test_fraction": None,
    "seed": 0,
    "threads": 1,
    "max_permutations": None,
    "truncation_tol": None,
    "convergence_tol": 0.01,
    "budget": None,
    "subset_samples": None,
    "out": ".",
    "plots": False,
    "standardize": False,
    "mode": "both",
    "contamination": 0.1,
    "direction": "remove_high",
    "steps": None,
    "variance": False,
}

# Keys that never influence numeric output and are kept out of the config
# echo so identical runs stay byte-identical (threads by contract, paths
# because reruns may target fresh directories).
ECHO_EXCLUDED = ("out", "threads", "config", "subcommand", "input", "phi")


@dataclass
class RunRequest:
    """One fully resolved CLI invocation."""

    subcommand: str
    input: str
    target: str
    id_column: str | None
    model: str
    ridge_lambda: float
    trees: int
    estimator: str
    test_fraction: float | None
    seed: int
    threads: int
    max_permutations: int | None
    truncation_tol: float | None
    convergence_tol: float
    budget: int | None
    subset_samples: int | None
    out: str
    plots: bool
    standardize: bool
    phi: str | None = None
    instance: str | None = None
    mode: str = "both"
    contamination: float = 0.1
    ranking: str | None = None
    direction: str = "remove_high"
    steps: int | None = None
    variance: bool = False
    estimators: str | None = None

    @property
    def symmetric(self) -> bool:
        return self.test_fraction is None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapres",
        description="Decompose regression residuals into per-training-instance "
        "Shapley contributions and derive instance analyses.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_shared(p: argparse.ArgumentParser) -> None:
        p.add_argument("--input", required=True, help="input CSV path")
        p.add_argument("--target", required=True, help="target column name")
        p.add_argument("--id-column", dest="id_column", help="id column name")
        p.add_argument("--model", choices=("ridge", "forest", "constant"))
        p.add_argument(
            "--lambda", dest="ridge_lambda", type=float, help="ridge penalty (default 1.0)"
        )
        p.add_argument("--trees", type=int, help="forest size (default 100)")
        p.add_argument("--estimator", choices=ESTIMATORS)
        group = p.add_mutually_exclusive_group()
        group.add_argument(
            "--symmetric",
            action="store_true",
            default=None,
            help="train and evaluate on every row (default)",
        )
        group.add_argument(
            "--test-fraction",
            dest="test_fraction",
            type=float,
            help="held-out fraction for an asymmetric split",
        )
        p.add_argument("--seed", type=int, help="root seed (default 0)")
        p.add_argument("--threads", type=int, help="worker threads (default 1)")
        p.add_argument("--max-permutations", dest="max_permutations", type=int)
        p.add_argument("--truncation-tol", dest="truncation_tol", type=float)
        p.add_argument("--convergence-tol", dest="convergence_tol", type=float)
        p.add_argument("--budget", type=int, help="kernel coalition budget")
        p.add_argument(
            "--subset-samples", dest="subset_samples", type=int, help="influence-all samples"
        )
        p.add_argument("--out", help="output directory (default .)")
        p.add_argument("--plots", action="store_true", default=None, help="emit SVG plots")
        p.add_argument(
            "--standardize",
            action="store_true",
            default=None,
            help="z-score features using training-split statistics",
        )
        p.add_argument("--config", help="JSON config file (flags win over it)")

    p = sub.add_parser("decompose", help="estimate the phi matrix and write CSV + meta")
    add_shared(p)

    p = sub.add_parser("cc", help="contribution/composition summary and scatter plots")
    add_shared(p)
    p.add_argument("--phi", required=True, help="phi CSV from a decompose run")
    p.add_argument(
        "--variance",
        action="store_true",
        default=None,
        help="also emit the variance-axes scatter",
    )

    p = sub.add_parser("force", help="force-plot data for one test instance")
    add_shared(p)
    p.add_argument("--phi", required=True)
    p.add_argument("--instance", required=True, help="test instance id")

    p = sub.add_parser("outliers", help="isolation-forest outlier flags")
    add_shared(p)
    p.add_argument("--phi", required=True)
    p.add_argument("--mode", choices=("behavior", "features", "both"))
    p.add_argument("--contamination", type=float, help="flagged fraction (default 0.1)")

    p = sub.add_parser("ablate", help="instance-removal curve")
    add_shared(p)
    p.add_argument("--phi", help="phi CSV to rank from (else computed fresh)")
    p.add_argument(
        "--ranking", required=True, choices=("contribution", "datashapley", "random")
    )
    p.add_argument("--direction", choices=("remove_high", "remove_low", "random"))
    p.add_argument("--steps", type=int, help="removals (default min(10, N_train-1))")

    p = sub.add_parser("compare", help="run several estimators and tabulate accuracy/time")
    add_shared(p)
    p.add_argument(
        "--estimators", required=True, help="comma-separated estimator names (>= 2)"
    )

    return parser


def _resolve_request(args: argparse.Namespace) -> RunRequest:
    merged = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CompatibilityError(f"config {config_path}: invalid JSON ({exc})")
        if not isinstance(loaded, dict):
            raise CompatibilityError(f"config {config_path}: expected a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise CompatibilityError(
                f"config {config_path}: unknown keys {sorted(unknown)}"
            )
        merged.update(loaded)
    cli_symmetric = getattr(args, "symmetric", None)
    for key, value in vars(args).items():
        if key in ("config", "symmetric") or value is None:
            continue
        merged[key] = value
    # --symmetric overrides a config-file test_fraction; a --test-fraction
    # flag (mutually exclusive with --symmetric) overrides a config
    # symmetric=true. Symmetry is simply "no test fraction".
    if cli_symmetric or (merged.get("symmetric") and getattr(args, "test_fraction", None) is None):
        merged["test_fraction"] = None
    merged.pop("symmetric", None)

    request_fields = {f.name for f in fields(RunRequest)}
    kwargs = {k: v for k, v in merged.items() if k in request_fields}
    kwargs["subcommand"] = args.subcommand
    req = RunRequest(**kwargs)
    if req.estimator.startswith("influence") and req.model != "ridge":
        raise CompatibilityError(
            f"influence requires ridge (estimator {req.estimator}, model {req.model})"
        )
    if req.threads < 1:
        raise CompatibilityError(f"--threads must be >= 1, got {req.threads}")
    return req


def _effective_config(req: RunRequest) -> dict:
    echo = {}
    for f in fields(RunRequest):
        if f.name in ECHO_EXCLUDED or f.name in ("instance", "estimators"):
            continue
        echo[f.name] = getattr(req, f.name)
    echo["symmetric"] = req.symmetric
    return echo


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _load_dataset(req: RunRequest) -> Dataset:
    return load_csv(req.input, req.target, req.id_column)


def _standardized(ds: Dataset, split: SplitPlan) -> Dataset:
    train = list(split.train_indices)
    mu = ds.features[train].mean(axis=0)
    sd = ds.features[train].std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    out = Dataset(features=(ds.features - mu) / sd, targets=ds.targets.copy(), ids=ds.ids)
    names = getattr(ds, "feature_names", None)
    if names is not None:
        object.__setattr__(out, "feature_names", names)
    return out


def _prepare(req: RunRequest) -> tuple[Dataset, SplitPlan, ModelSpec]:
    ds = _load_dataset(req)
    split = make_split(
        ds,
        req.test_fraction if req.test_fraction is not None else 0.0,
        derive_seed(req.seed, "split"),
        req.symmetric,
    )
    if req.standardize:
        ds = _standardized(ds, split)
    spec = ModelSpec(
        kind=req.model,
        ridge_lambda=req.ridge_lambda,
        forest_trees=req.trees,
        fit_seed=derive_seed(req.seed, "fit"),
    )
    return ds, split, spec


def _default_budget(n_train: int) -> int:
    if n_train <= 12:
        return max(2, (1 << n_train) - 2)
    return max(4 * n_train, 256)


def _mc_config(req: RunRequest) -> McConfig:
    return McConfig(
        max_permutations=req.max_permutations,
        convergence_tol=req.convergence_tol,
        truncation_tol=req.truncation_tol,
        seed=derive_seed(req.seed, "mc"),
        threads=req.threads,
    )


def _run_estimator(
    req: RunRequest, spec: ModelSpec, ds: Dataset, split: SplitPlan, estimator: str
) -> PhiMatrix:
    if estimator.startswith("influence") and spec.kind != "ridge":
        raise CompatibilityError(
            f"influence requires ridge (estimator {estimator}, model {spec.kind})"
        )
    if estimator == "exact":
        return decompose_exact(spec, ds, split)
    if estimator == "mc":
        return decompose_monte_carlo(spec, ds, split, _mc_config(req))
    if estimator == "kernel":
        budget = req.budget if req.budget is not None else _default_budget(
            len(split.train_indices)
        )
        return decompose_kernel(
            spec, ds, split, budget, seed=derive_seed(req.seed, "kernel"), threads=req.threads
        )
    if estimator == "influence-all":
        cfg = InfluenceConfig(
            subset_samples=req.subset_samples,
            seed=derive_seed(req.seed, "influence"),
            threads=req.threads,
        )
        return decompose_all_s(
            ds, split, req.ridge_lambda, cfg, fit_seed=spec.fit_seed
        )
    if estimator == "influence-largest":
        return decompose_largest_s(ds, split, req.ridge_lambda, fit_seed=spec.fit_seed)
    raise CompatibilityError(f"unknown estimator {estimator!r}")


def _out_dir(req: RunRequest) -> Path:
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


def _load_phi_checked(req: RunRequest, ds: Dataset) -> PhiMatrix:
    phi = read_phi_csv(req.phi)
    known = set(ds.ids)
    missing = [rid for rid in (*phi.train_ids, *phi.test_ids) if rid not in known]
    if missing:
        raise CompatibilityError(
            f"phi ids not present in {req.input}: {missing[:5]}"
            + ("..." if len(missing) > 5 else "")
        )
    return phi


def _safe_name(s: str) -> str:
    cleaned = "".join(c if c.isalnum() or c in "-_." else "_" for c in s)
    return cleaned or "instance"


# ---------------------------------------------------------------------------
# subcommands


def cmd_decompose(req: RunRequest) -> int:
    ds, split, spec = _prepare(req)
    phi = _run_estimator(req, spec, ds, split, req.estimator)
    phi.meta.extra["effective_config"] = _effective_config(req)
    out = _out_dir(req)
    write_phi_csv(phi, out / "phi.csv")
    print(f"wrote {out / 'phi.csv'}")
    write_meta_json(phi.meta, out / "phi_meta.json")
    print(f"wrote {out / 'phi_meta.json'}")
    return 0


def cmd_cc(req: RunRequest) -> int:
    ds = _load_dataset(req)
    phi = _load_phi_checked(req, ds)
    targets = {rid: float(t) for rid, t in zip(ds.ids, ds.targets)}
    phi_c = analysis.normalize_contribution(phi)
    rows = analysis.cc_summary(phi, phi_c, None, targets)
    out = _out_dir(req)
    analysis.write_cc_csv(rows, out / "cc_summary.csv")
    print(f"wrote {out / 'cc_summary.csv'}")
    if req.plots or req.variance:
        symmetric_rows = [r for r in rows if r.contribution_mean is not None and r.composition_mean is not None]
        if not symmetric_rows:
            print("note: CC scatter needs a symmetric run; skipping plots")
            return 0
        colors = [r.target for r in symmetric_rows]
        _emit(
            out / "cc_mean.svg",
            svgplot.scatter_svg(
                [r.contribution_mean for r in symmetric_rows],
                [r.composition_mean for r in symmetric_rows],
                colors,
                "contribution mean",
                "composition mean",
                "CC means",
            ),
        )
        if req.variance:
            _emit(
                out / "cc_var.svg",
                svgplot.scatter_svg(
                    [r.contribution_var for r in symmetric_rows],
                    [r.composition_var for r in symmetric_rows],
                    colors,
                    "contribution var",
                    "composition var",
                    "CC variances",
                ),
            )
    return 0


def cmd_force(req: RunRequest) -> int:
    ds = _load_dataset(req)
    phi = _load_phi_checked(req, ds)
    targets = {rid: float(t) for rid, t in zip(ds.ids, ds.targets)}
    try:
        force = analysis.force_segments(phi, req.instance, targets)
    except ValueError as exc:
        raise CompatibilityError(str(exc)) from None
    out = _out_dir(req)
    stem = f"force_{_safe_name(req.instance)}"
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(force.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / (stem + '.json')}")
    if req.plots:
        _emit(
            out / f"{stem}.svg",
            svgplot.force_svg(force, f"residual decomposition, instance {req.instance}"),
        )
    return 0


def cmd_outliers(req: RunRequest) -> int:
    ds = _load_dataset(req)
    phi = _load_phi_checked(req, ds)
    phi_c = analysis.normalize_contribution(phi)
    report = analysis.behavioral_outliers(
        phi_c, ds, req.mode, req.contamination, derive_seed(req.seed, "iforest")
    )
    out = _out_dir(req)

    def write_mode(name: str, flagged, scores) -> None:
        lines = ["id,score"]
        for rid in flagged:
            lines.append(f"{rid},{repr(scores[rid])}")
        _emit(out / f"outliers_{name}.csv", "\n".join(lines) + "\n")

    if report.behavior is not None:
        write_mode("behavior", report.behavior, report.behavior_scores)
    if report.features is not None:
        write_mode("features", report.features, report.feature_scores)
    if report.both is not None:
        lines = ["id"] + list(report.both)
        _emit(out / "outliers_both.csv", "\n".join(lines) + "\n")
    return 0


def cmd_ablate(req: RunRequest) -> int:
    ds, split, spec = _prepare(req)
    n_train = len(split.train_indices)
    direction = req.direction
    if req.ranking == "contribution":
        if req.phi:
            phi = _load_phi_checked(req, ds)
            train_ids = tuple(ds.ids[k] for k in split.train_indices)
            if set(phi.train_ids) != set(train_ids):
                raise CompatibilityError(
                    "phi training ids do not match the current split; "
                    "rerun decompose with the same flags"
                )
            values = analysis.contribution_value(analysis.normalize_contribution(phi))
            by_id = dict(zip(phi.train_ids, values))
            ranking = np.array([by_id[rid] for rid in train_ids])
        else:
            phi = _run_estimator(req, spec, ds, split, req.estimator)
            ranking = analysis.contribution_value(analysis.normalize_contribution(phi))
    elif req.ranking == "datashapley":
        cfg = _mc_config(req)
        ds_cfg = McConfig(
            max_permutations=cfg.max_permutations,
            convergence_tol=cfg.convergence_tol,
            convergence_window=cfg.convergence_window,
            truncation_tol=cfg.truncation_tol,
            seed=derive_seed(req.seed, "datashapley"),
            threads=cfg.threads,
        )
        ranking = analysis.data_shapley_values(spec, ds, split, ds_cfg)
    else:
        direction = "random"
        ranking = np.zeros(n_train)
    steps = req.steps if req.steps is not None else min(10, n_train - 1)
    shuffle_seeds = tuple(derive_seed(req.seed, f"shuffle{k}") for k in range(10))
    curve = analysis.ablation_curve(
        spec, ds, split, ranking, direction, steps, seeds=shuffle_seeds
    )
    out = _out_dir(req)
    analysis.write_ablation_csv([(curve, req.ranking)], out / "ablation.csv")
    print(f"wrote {out / 'ablation.csv'}")
    if req.plots:
        xs = [r[0] for r in curve.rows]
        ys = [r[1] for r in curve.rows]
        _emit(
            out / "ablation.svg",
            svgplot.line_svg(
                [(f"{req.ranking} ({direction})", xs, ys)],
                "instances removed",
                "test MSE",
                "ablation curve",
            ),
        )
    return 0


def cmd_compare(req: RunRequest) -> int:
    names = [e.strip() for e in (req.estimators or "").split(",") if e.strip()]
    if len(names) < 2:
        raise CompatibilityError("compare needs at least 2 estimators")
    for name in names:
        if name not in ESTIMATORS:
            raise CompatibilityError(f"unknown estimator {name!r}, expected {ESTIMATORS}")
    ds, split, spec = _prepare(req)
    targets = {rid: float(t) for rid, t in zip(ds.ids, ds.targets)}
    out = _out_dir(req)
    rows = []
    for name in names:
        try:
            phi = _run_estimator(req, spec, ds, split, name)
        except Exception as exc:
            rows.append((name, None, None, None, f"error: {exc}"))
            continue
        _, mean_err, max_err = analysis.decomposition_accuracy(phi)
        rows.append((name, phi.meta.wall_time_seconds, mean_err, max_err, "ok"))
        if req.plots and split.symmetric:
            phi_c = analysis.normalize_contribution(phi)
            cc = analysis.cc_summary(phi, phi_c, split, targets)
            _emit(
                out / f"cc_{name}.svg",
                svgplot.scatter_svg(
                    [r.contribution_mean for r in cc],
                    [r.composition_mean for r in cc],
                    [r.target for r in cc],
                    "contribution mean",
                    "composition mean",
                    f"CC means ({name})",
                ),
            )
    rows.sort(key=lambda r: (r[4] != "ok", r[1] if r[1] is not None else float("inf")))
    lines = ["estimator,wall_time_seconds,mean_error,max_error,status"]
    for name, wall, mean_err, max_err, status in rows:
        lines.append(
            ",".join(
                [
                    name,
                    "" if wall is None else repr(float(wall)),
                    "" if mean_err is None else repr(float(mean_err)),
                    "" if max_err is None else repr(float(max_err)),
                    status.replace(",", ";"),
                ]
            )
        )
    _emit(out / "compare.csv", "\n".join(lines) + "\n")
    return 0


COMMANDS = {
    "decompose": cmd_decompose,
    "cc": cmd_cc,
    "force": cmd_force,
    "outliers": cmd_outliers,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        req = _resolve_request(args)
        return COMMANDS[req.subcommand](req)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CsvFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # estimator failures and internal errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
