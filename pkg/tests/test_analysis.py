"""Contribution normalization, CC summaries, force data, outliers,
valuation, and ablation."""

import math

import numpy as np
import pytest
from conftest import brute_force_phi
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shapres.analysis import (
    AblationCurve,
    ContributionMatrix,
    ablation_curve,
    behavioral_outliers,
    cc_summary,
    contribution_value,
    data_shapley_values,
    decomposition_accuracy,
    force_segments,
    iforest_scores,
    normalize_contribution,
    write_ablation_csv,
    write_cc_csv,
)
from shapres.dataio import Dataset, SplitPlan, inject_anomalies, make_split, synthesize_linear
from shapres.engine import McConfig, PhiMatrix, RunMeta, decompose_exact, decompose_monte_carlo
from shapres.influence import decompose_largest_s
from shapres.models import ModelSpec, fit, predict


def sym_split(n):
    idx = tuple(range(n))
    return SplitPlan(train_indices=idx, test_indices=idx, symmetric=True)


def hand_phi(values, residuals, train_ids=None, test_ids=None):
    values = np.asarray(values, dtype=float)
    n_test, n_train = values.shape
    meta = RunMeta(
        estimator="unknown",
        seed=0,
        permutations_used=0,
        truncation_tol=0.0,
        convergence_tol=0.0,
        converged=False,
        wall_time_seconds=0.0,
        model={"kind": "constant"},
    )
    return PhiMatrix(
        values=values,
        residuals_full=np.asarray(residuals, dtype=float),
        train_ids=train_ids or tuple(str(j) for j in range(n_train)),
        test_ids=test_ids or tuple(str(i) for i in range(n_test)),
        meta=meta,
    )


class TestNormalizeContribution:
    def test_negative_residual_keeps_harmful_positive(self):
        # e=-2: the row's phi values already point away from zero, so the
        # normalized contribution of a harmful instance comes out positive
        phi = hand_phi([[-1.0, -1.0]], [-2.0])
        phi_c = normalize_contribution(phi)
        np.testing.assert_array_equal(phi_c.values, [[-1.0, -1.0]])

    def test_positive_residual_flips_sign(self):
        phi = hand_phi([[3.0, -1.0]], [2.0])
        phi_c = normalize_contribution(phi)
        np.testing.assert_array_equal(phi_c.values, [[-3.0, 1.0]])

    def test_zero_residual_counts_as_positive_sign(self):
        phi = hand_phi([[0.5, -0.5]], [0.0])
        phi_c = normalize_contribution(phi)
        np.testing.assert_array_equal(phi_c.values, [[-0.5, 0.5]])

    @given(
        values=hnp.arrays(
            np.float64,
            (3, 4),
            elements=st.floats(-100, 100, allow_nan=False),
        ),
        residuals=hnp.arrays(
            np.float64, (3,), elements=st.floats(-50, 50, allow_nan=False)
        ),
    )
    @settings(max_examples=50, deadline=None)
    def test_magnitudes_preserved(self, values, residuals):
        phi = hand_phi(values, residuals)
        phi_c = normalize_contribution(phi)
        np.testing.assert_array_equal(np.abs(phi_c.values), np.abs(values))

    def test_ids_carried_over(self):
        phi = hand_phi([[1.0]], [1.0], train_ids=("tr",), test_ids=("te",))
        phi_c = normalize_contribution(phi)
        assert phi_c.train_ids == ("tr",) and phi_c.test_ids == ("te",)
        assert phi_c.source.estimator == "unknown"


class TestCCSummary:
    def test_constant_model_symmetric_stats(self):
        ds = Dataset(
            features=np.zeros((2, 1)), targets=np.array([2.0, 4.0]), ids=("a", "b")
        )
        split = sym_split(2)
        phi = decompose_exact(ModelSpec(kind="constant"), ds, split)
        phi_c = normalize_contribution(phi)
        rows = cc_summary(phi, phi_c, split, targets={"a": 2.0, "b": 4.0})
        assert [r.id for r in rows] == ["a", "b"]
        # composition stats come from raw phi rows: (-1,-1) and (-2,-2)
        assert rows[0].composition_mean == pytest.approx(-1.0)
        assert rows[1].composition_mean == pytest.approx(-2.0)
        assert rows[0].composition_var == pytest.approx(0.0)
        # contribution stats come from phi^c columns: both rows negative
        # residuals, so phi^c = phi and column a is (-1, -2)
        assert rows[0].contribution_mean == pytest.approx(-1.5)
        assert rows[0].contribution_var == pytest.approx(0.25)
        assert rows[0].self_contribution == pytest.approx(-1.0)
        assert rows[1].target == 4.0

    def test_composition_mean_times_n_recovers_residual(self):
        ds = synthesize_linear(6, 2, 0.4, seed=15)
        split = sym_split(6)
        phi = decompose_exact(ModelSpec(kind="ridge"), ds, split)
        rows = cc_summary(phi, normalize_contribution(phi), split)
        for i, row in enumerate(rows):
            assert row.composition_mean * 6 == pytest.approx(
                phi.residuals_full[i], abs=1e-10
            )

    def test_asymmetric_emits_train_then_test_rows(self):
        ds = synthesize_linear(6, 1, 0.2, seed=3)
        split = make_split(ds, 0.5, 2, False)
        phi = decompose_exact(ModelSpec(kind="ridge"), ds, split)
        rows = cc_summary(phi, normalize_contribution(phi), split)
        n_train, n_test = len(split.train_indices), len(split.test_indices)
        assert len(rows) == n_train + n_test
        for row in rows[:n_train]:
            assert row.contribution_mean is not None
            assert row.composition_mean is None and row.self_contribution is None
        for row in rows[n_train:]:
            assert row.composition_mean is not None
            assert row.contribution_mean is None

    def test_variances_nonnegative(self):
        ds = synthesize_linear(5, 2, 0.3, seed=7)
        split = sym_split(5)
        phi = decompose_exact(ModelSpec(kind="ridge"), ds, split)
        for row in cc_summary(phi, normalize_contribution(phi), split):
            assert row.contribution_var >= 0.0
            assert row.composition_var >= 0.0

    def test_csv_layout(self, tmp_path):
        ds = synthesize_linear(3, 1, 0.2, seed=2)
        split = sym_split(3)
        phi = decompose_exact(ModelSpec(kind="constant"), ds, split)
        rows = cc_summary(phi, normalize_contribution(phi), split)
        path = tmp_path / "cc.csv"
        write_cc_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == (
            "id,target,contribution_mean,contribution_var,"
            "composition_mean,composition_var,self_contribution"
        )
        assert len(lines) == 4
        # empty cell for the optional target
        assert lines[1].split(",")[1] == ""


class TestForceSegments:
    def test_all_negative_row(self):
        phi = hand_phi([[-1.0, -1.0]], [-2.0], train_ids=("a", "b"))
        force = force_segments(phi, "0")
        assert [s.value for s in force.segments] == [-1.0, -1.0]
        assert [s.cumulative for s in force.segments] == [-1.0, -2.0]
        assert force.base == 0.0 and force.final == -2.0

    def test_positives_lead_in_magnitude_order(self):
        phi = hand_phi([[0.5, 3.0, -1.0, -0.25]], [2.25], train_ids=tuple("abcd"))
        force = force_segments(phi, "0")
        assert [s.train_id for s in force.segments] == ["b", "a", "c", "d"]
        assert [s.value for s in force.segments] == [3.0, 0.5, -1.0, -0.25]
        np.testing.assert_allclose(
            [s.cumulative for s in force.segments], [3.0, 3.5, 2.5, 2.25]
        )

    def test_ties_broken_by_position(self):
        phi = hand_phi([[1.0, 1.0, 1.0]], [3.0], train_ids=("z", "m", "a"))
        force = force_segments(phi, "0")
        assert [s.train_id for s in force.segments] == ["z", "m", "a"]

    def test_cumulative_ends_at_residual_for_efficient_estimators(self):
        ds = synthesize_linear(5, 2, 0.3, seed=18)
        split = sym_split(5)
        phi = decompose_exact(ModelSpec(kind="ridge"), ds, split)
        for tid in phi.test_ids:
            force = force_segments(phi, tid)
            assert force.segments[-1].cumulative == pytest.approx(
                force.final, abs=1e-9
            )

    def test_largest_residual_has_longest_bar_extent(self):
        ds = synthesize_linear(6, 1, 0.5, seed=25)
        split = sym_split(6)
        phi = decompose_exact(ModelSpec(kind="constant"), ds, split)
        extents = np.abs(phi.values).sum(axis=1)
        i_star = int(np.argmax(np.abs(phi.residuals_full)))
        assert int(np.argmax(extents)) == i_star

    def test_color_keys_from_train_targets(self):
        phi = hand_phi([[1.0, -1.0]], [0.0], train_ids=("a", "b"))
        force = force_segments(phi, "0", train_targets={"a": 7.0})
        by_id = {s.train_id: s.color_key for s in force.segments}
        assert by_id == {"a": 7.0, "b": 0.0}

    def test_unknown_test_id(self):
        phi = hand_phi([[1.0]], [1.0])
        with pytest.raises(ValueError, match="unknown test id"):
            force_segments(phi, "nope")

    def test_as_dict_round_trips_segments(self):
        phi = hand_phi([[2.0, -1.0]], [1.0], train_ids=("a", "b"))
        d = force_segments(phi, "0").as_dict()
        assert d["test_id"] == "0"
        assert d["segments"][0] == {
            "train_id": "a",
            "value": 2.0,
            "cumulative": 2.0,
            "color_key": 0.0,
        }


def isolation_oracle(points: list[float], trials: int, limit: int, seed: int) -> list[float]:
    """Plain 1-D isolation simulation, coded from the algorithm statement:
    split uniformly inside [min, max], recurse on the side holding the
    point, stop when alone or at the depth limit, then add the unresolved
    subtree's expected path. Returns the mean path length per point."""
    rng = np.random.default_rng(seed)

    def c(m):
        if m <= 1:
            return 0.0
        return 2.0 * (math.log(m - 1) + 0.5772156649) - 2.0 * (m - 1) / m

    totals = [0.0] * len(points)
    for _ in range(trials):
        for k in range(len(points)):
            group = list(points)
            depth = 0
            while len(group) > 1 and depth < limit:
                lo, hi = min(group), max(group)
                if lo == hi:
                    break
                cut = rng.uniform(lo, hi)
                group = [v for v in group if (v < cut) == (points[k] < cut)]
                depth += 1
            totals[k] += depth + c(len(group))
    return [t / trials for t in totals]


class TestIsolationForest:
    def test_isolated_point_scores_highest(self):
        pts = np.array([[0.0], [0.1], [0.2], [10.0]])
        scores = iforest_scores(pts, seed=0, trees=400)
        assert int(np.argmax(scores)) == 3

    def test_mean_depth_matches_independent_simulation(self):
        pts = [0.0, 0.1, 0.2, 10.0]
        limit = math.ceil(math.log2(4))
        oracle = isolation_oracle(pts, trials=4000, limit=limit, seed=1)
        scores = iforest_scores(np.array(pts)[:, None], seed=2, trees=4000)
        c_psi = 2.0 * (math.log(3) + 0.5772156649) - 2.0 * 3 / 4
        oracle_scores = [2.0 ** (-d / c_psi) for d in oracle]
        np.testing.assert_allclose(scores, oracle_scores, atol=0.02)

    def test_scores_in_unit_interval(self):
        pts = np.random.default_rng(5).normal(size=(40, 3))
        scores = iforest_scores(pts, seed=1)
        assert ((scores > 0.0) & (scores < 1.0)).all()

    def test_identical_points_share_scores(self):
        pts = np.zeros((10, 2))
        scores = iforest_scores(pts, seed=3)
        assert np.unique(scores).size == 1

    def test_deterministic_given_seed(self):
        pts = np.random.default_rng(8).normal(size=(30, 2))
        np.testing.assert_array_equal(
            iforest_scores(pts, seed=4), iforest_scores(pts, seed=4)
        )

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            iforest_scores(np.zeros((1, 2)), seed=0)


class TestBehavioralOutliers:
    def _phi_c(self, ds, split, seed=0):
        phi = decompose_monte_carlo(
            ModelSpec(kind="ridge"),
            ds,
            split,
            McConfig(convergence_tol=0.0, truncation_tol=0.0, seed=seed),
        )
        return normalize_contribution(phi)

    def test_flag_count_from_contamination(self):
        ds = synthesize_linear(40, 2, 0.3, seed=30)
        split = sym_split(40)
        phi_c = self._phi_c(ds, split)
        report = behavioral_outliers(phi_c, ds, "behavior", 0.1, seed=1)
        assert len(report.behavior) == 4
        assert report.features is None and report.both is None

    def test_minimum_one_flag(self):
        ds = synthesize_linear(5, 1, 0.2, seed=4)
        phi_c = self._phi_c(ds, sym_split(5))
        report = behavioral_outliers(phi_c, ds, "behavior", 0.05, seed=1)
        assert len(report.behavior) == 1

    def test_both_mode_intersects(self):
        ds = synthesize_linear(30, 2, 0.3, seed=31)
        phi_c = self._phi_c(ds, sym_split(30))
        report = behavioral_outliers(phi_c, ds, "both", 0.2, seed=2)
        assert set(report.both) == set(report.behavior) & set(report.features)
        assert report.both == tuple(sorted(report.both))

    def test_scores_ranked_descending(self):
        ds = synthesize_linear(20, 2, 0.3, seed=32)
        phi_c = self._phi_c(ds, sym_split(20))
        report = behavioral_outliers(phi_c, ds, "behavior", 0.25, seed=3)
        flagged_scores = [report.behavior_scores[r] for r in report.behavior]
        assert flagged_scores == sorted(flagged_scores, reverse=True)
        unflagged = set(phi_c.train_ids) - set(report.behavior)
        assert min(flagged_scores) >= max(report.behavior_scores[r] for r in unflagged)

    def test_feature_only_outlier_lands_in_feature_mode_only(self):
        # one point far out in feature space but with the same target
        # structure as everyone else: a constant model treats all rows
        # identically, so behavior space cannot separate it
        n = 12
        features = np.linspace(0.0, 1.0, n)[:, None].copy()
        features[-1, 0] = 100.0
        ds = Dataset(
            features=features,
            targets=np.zeros(n),
            ids=tuple(f"r{k:02d}" for k in range(n)),
        )
        split = sym_split(n)
        phi = decompose_exact(ModelSpec(kind="constant"), ds, split)
        phi_c = normalize_contribution(phi)
        report = behavioral_outliers(phi_c, ds, "both", 0.1, seed=5)
        assert report.features == ("r11",)
        # all behavior points coincide, so ties resolve by ascending id
        assert report.behavior == ("r00",)

    def test_anomalous_training_target_lands_in_behavior_mode(self):
        ds = synthesize_linear(30, 1, 0.1, seed=33)
        ds, tainted = inject_anomalies(ds, 1, 8.0, seed=9)
        phi_c = self._phi_c(ds, sym_split(30))
        report = behavioral_outliers(phi_c, ds, "behavior", 0.1, seed=6)
        assert tainted[0] in report.behavior

    def test_mode_and_contamination_validation(self):
        ds = synthesize_linear(5, 1, 0.2, seed=4)
        phi_c = self._phi_c(ds, sym_split(5))
        with pytest.raises(ValueError, match="mode"):
            behavioral_outliers(phi_c, ds, "everything", 0.1, seed=0)
        with pytest.raises(ValueError, match="contamination"):
            behavioral_outliers(phi_c, ds, "behavior", 0.6, seed=0)


class TestContributionValue:
    def test_mean_sq_and_sq_mean_diverge_on_sign_flips(self):
        phi = hand_phi([[1.0], [-1.0]], [1.0, 1.0])
        phi_c = normalize_contribution(phi)
        # phi^c column is (-1, 1): mean square 1, squared mean 0
        assert contribution_value(phi_c, "mean_sq")[0] == pytest.approx(1.0)
        assert contribution_value(phi_c, "sq_mean")[0] == pytest.approx(0.0)

    def test_constant_fixture_hand_value(self):
        ds = Dataset(
            features=np.zeros((2, 1)), targets=np.array([2.0, 4.0]), ids=("a", "b")
        )
        phi = decompose_exact(ModelSpec(kind="constant"), ds, sym_split(2))
        phi_c = normalize_contribution(phi)
        # phi^c columns are (-1, -2): mean of squares is 2.5
        np.testing.assert_allclose(
            contribution_value(phi_c), [2.5, 2.5], atol=1e-12
        )

    def test_unknown_kind(self):
        phi_c = normalize_contribution(hand_phi([[1.0]], [1.0]))
        with pytest.raises(ValueError, match="kind"):
            contribution_value(phi_c, "rms")


class TestDataShapley:
    def _cfg(self, **kw):
        base = dict(convergence_tol=0.0, truncation_tol=0.0, seed=2)
        base.update(kw)
        return McConfig(**base)

    def test_zero_targets_zero_values(self):
        ds = Dataset(
            features=np.linspace(0, 1, 5)[:, None].copy(),
            targets=np.zeros(5),
            ids=tuple(str(k) for k in range(5)),
        )
        vals = data_shapley_values(
            ModelSpec(kind="constant"), ds, sym_split(5), self._cfg()
        )
        np.testing.assert_allclose(vals, np.zeros(5), atol=1e-12)

    def test_telescoping_total(self):
        ds = synthesize_linear(6, 2, 0.3, seed=40)
        split = make_split(ds, 0.3, 2, False)
        spec = ModelSpec(kind="ridge")
        vals = data_shapley_values(spec, ds, split, self._cfg(max_permutations=30))
        test = list(split.test_indices)
        y_test = ds.targets[test]
        model = fit(spec, ds, list(split.train_indices))
        v_full = -float(np.mean((predict(model, ds.features[test]) - y_test) ** 2))
        v_empty = -float(np.mean(y_test**2))
        assert vals.sum() == pytest.approx(v_full - v_empty, abs=1e-8)

    def test_matches_brute_force_enumeration(self):
        import itertools

        ds = synthesize_linear(5, 1, 0.3, seed=41)
        split = make_split(ds, 0.4, 1, False)
        spec = ModelSpec(kind="ridge", ridge_lambda=1.0)
        train = list(split.train_indices)
        test = list(split.test_indices)
        y_test = ds.targets[test]
        X_test = ds.features[test]
        n = len(train)

        def v(subset):
            if not subset:
                return -float(np.mean(y_test**2))
            model = fit(spec, ds, [train[k] for k in subset])
            return -float(np.mean((predict(model, X_test) - y_test) ** 2))

        ref = np.zeros(n)
        for j in range(n):
            others = [k for k in range(n) if k != j]
            for size in range(n):
                w = (
                    math.factorial(size)
                    * math.factorial(n - size - 1)
                    / math.factorial(n)
                )
                for sub in itertools.combinations(others, size):
                    ref[j] += w * (v((*sub, j)) - v(sub))

        # the sampler is unbiased, so a large budget lands near the
        # enumerated values; the tolerance covers its sampling error
        vals = data_shapley_values(
            spec, ds, split, self._cfg(max_permutations=30000, seed=7)
        )
        np.testing.assert_allclose(vals, ref, atol=0.02)
        coarse = data_shapley_values(
            spec, ds, split, self._cfg(max_permutations=30, seed=7)
        )
        assert np.abs(vals - ref).mean() < np.abs(coarse - ref).mean()


class TestAblation:
    def test_zero_steps_is_baseline_only(self):
        ds = synthesize_linear(8, 1, 0.2, seed=50)
        split = make_split(ds, 0.25, 1, False)
        spec = ModelSpec(kind="ridge")
        curve = ablation_curve(spec, ds, split, np.zeros(6), "remove_high", 0)
        assert len(curve.rows) == 1
        removed, mse = curve.rows[0]
        assert removed == 0
        model = fit(spec, ds, list(split.train_indices))
        test = list(split.test_indices)
        expected = float(
            np.mean((predict(model, ds.features[test]) - ds.targets[test]) ** 2)
        )
        assert mse == pytest.approx(expected, rel=1e-12)

    def test_remove_high_drops_planted_noise_first(self):
        ds = synthesize_linear(24, 1, 0.05, seed=51)
        ds, tainted = inject_anomalies(ds, 2, 6.0, seed=3)
        split = make_split(ds, 0.25, 4, False)
        # rank training rows by their own target distortion: the injected
        # rows carry the largest |target - sum(x)| by construction
        train = list(split.train_indices)
        distortion = np.abs(ds.targets[train] - ds.features[train].sum(axis=1))
        spec = ModelSpec(kind="ridge", ridge_lambda=1e-3)
        high = ablation_curve(spec, ds, split, distortion, "remove_high", 3)
        rand = ablation_curve(spec, ds, split, distortion, "random", 3)
        base = high.rows[0][1]
        assert rand.rows[0][1] == pytest.approx(base, rel=1e-12)
        # dropping the planted rows moves MSE further than random removal
        assert abs(high.rows[3][1] - base) > abs(rand.rows[3][1] - base)

    def test_remove_low_reverses_order(self):
        ds = synthesize_linear(7, 1, 0.3, seed=52)
        split = make_split(ds, 0.3, 2, False)
        spec = ModelSpec(kind="constant")
        ranking = np.arange(5, dtype=float)
        low = ablation_curve(spec, ds, split, ranking, "remove_low", 2)
        high = ablation_curve(spec, ds, split, ranking, "remove_high", 2)
        assert low.direction == "remove_low"
        assert len(low.rows) == len(high.rows) == 3

    def test_random_is_mean_over_seeds(self):
        ds = synthesize_linear(9, 1, 0.2, seed=53)
        split = make_split(ds, 0.3, 1, False)
        spec = ModelSpec(kind="ridge")
        n = len(split.train_indices)
        single = ablation_curve(spec, ds, split, np.zeros(n), "random", 2, seeds=(5,))
        again = ablation_curve(spec, ds, split, np.zeros(n), "random", 2, seeds=(5,))
        assert single.rows == again.rows
        pair = ablation_curve(spec, ds, split, np.zeros(n), "random", 2, seeds=(5, 6))
        other = ablation_curve(spec, ds, split, np.zeros(n), "random", 2, seeds=(6,))
        for (_, m_pair), (_, m_a), (_, m_b) in zip(pair.rows, single.rows, other.rows):
            assert m_pair == pytest.approx((m_a + m_b) / 2.0, rel=1e-12)

    def test_steps_bounds(self):
        ds = synthesize_linear(5, 1, 0.2, seed=54)
        split = make_split(ds, 0.4, 0, False)
        spec = ModelSpec(kind="constant")
        with pytest.raises(ValueError, match="steps"):
            ablation_curve(spec, ds, split, np.zeros(3), "remove_high", 3)
        with pytest.raises(ValueError, match="direction"):
            ablation_curve(spec, ds, split, np.zeros(3), "sideways", 1)

    def test_csv_layout(self, tmp_path):
        curve = AblationCurve(direction="remove_high", rows=((0, 1.5), (1, 1.25)))
        path = tmp_path / "ab.csv"
        write_ablation_csv([(curve, "contribution")], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "removed,mse,direction,ranking_name"
        assert lines[1] == "0,1.5,remove_high,contribution"
        assert lines[2] == "1,1.25,remove_high,contribution"


class TestDecompositionAccuracy:
    def test_exact_rows_reconstruct(self):
        ds = synthesize_linear(6, 2, 0.3, seed=60)
        phi = decompose_exact(ModelSpec(kind="ridge"), ds, sym_split(6))
        err, mean_err, max_err = decomposition_accuracy(phi)
        assert err.shape == (6,)
        assert max_err <= 1e-8
        assert mean_err <= max_err

    def test_largest_s_rows_do_not_reconstruct(self):
        ds = synthesize_linear(6, 2, 0.3, seed=60)
        phi = decompose_largest_s(ds, sym_split(6), 1.0)
        _, mean_err, _ = decomposition_accuracy(phi)
        assert mean_err > 1e-6

    def test_mirrors_brute_force_on_small_problem(self):
        ds = synthesize_linear(4, 1, 0.3, seed=61)
        split = make_split(ds, 0.5, 2, False)
        spec = ModelSpec(kind="ridge")
        phi = decompose_exact(spec, ds, split)
        ref = brute_force_phi(spec, ds, split)
        np.testing.assert_allclose(phi.values, ref, atol=1e-10)
