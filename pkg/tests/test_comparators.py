import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TERNARY_CODING, three_stage_dataset, two_stage_dataset, two_stage_spec

from qlaci import (
    Dataset,
    StageRecord,
    Trajectory,
    fit_qlearning,
)
from qlaci.bounds import GammaSearch, bounds_two_stage
from qlaci.comparators import (
    ToyEstimate,
    UnsupportedMethodError,
    ppe_interval,
    ppe_statistic,
    st_interval,
    st_pseudo_outcome,
    toy_estimates,
    toy_sweep,
)
from qlaci.dataio import design_rows, feature_matrix, present_mask
from qlaci.linreg import OlsFit, fit_ols
from qlaci.pretest import parse_lambda_rule
from qlaci.resample import BootstrapPlan

ZERO_BOX = GammaSearch(n_gamma=1, box_halfwidth_multiplier=1e-12,
                       include_center=True, rng_seed=0)


def naive_ppe(ds, fit, ref1, ref2, lam, c):
    """Direct evaluation of the plug-in pretesting statistic for the binary
    indicator design, built from raw trajectory columns."""
    n = ds.n
    x1 = np.array([t.stages[0].covariates[0] for t in ds.trajectories])
    y1 = np.array([t.stages[0].reward for t in ds.trajectories])
    x2 = np.array([t.stages[1].covariates[0] for t in ds.trajectories])
    a2 = np.array([t.stages[1].action for t in ds.trajectories])
    code1 = np.array([1.0 if t.stages[0].action == 1 else -1.0
                      for t in ds.trajectories])
    B1 = np.column_stack([np.ones(n), x1, code1])
    ind = (a2 == 1).astype(float)
    H0 = np.column_stack([np.ones(n), x2])
    H1 = np.column_stack([np.ones(n), x2])
    B2 = np.column_stack([H0, ind[:, None] * H1])
    y2 = np.array([t.stages[1].reward for t in ds.trajectories])

    b2 = np.linalg.solve(B2.T @ B2, B2.T @ y2)
    r2 = y2 - B2 @ b2
    cov2 = (r2 @ r2 / n) * n * np.linalg.inv(B2.T @ B2)
    b20, b21 = b2[:2], b2[2:]
    ref20, ref21 = ref2[:2], ref2[2:]

    pseudo_ref = y1 + H0 @ ref20 + np.maximum(H1 @ ref21, 0.0)
    z = pseudo_ref + H0 @ (b20 - ref20) - B1 @ ref1
    gram_inv1 = n * np.linalg.inv(B1.T @ B1)
    a = (B1 @ (gram_inv1 @ c)) / n
    smooth = math.sqrt(n) * float(a @ z)

    V = math.sqrt(n) * (b21 - ref21)
    cov_int = cov2[2:, 2:]
    total = smooth
    for u in range(n):
        h = H1[u]
        stat = n * (h @ b21) ** 2 / (h @ cov_int @ h)
        U = math.sqrt(n) * (max(h @ b21, 0.0) - max(h @ ref21, 0.0))
        if stat <= lam:
            total += a[u] * max(h @ V, 0.0)
        else:
            total += a[u] * U
    return total


def exact_stage2_dataset(n=24, seed=5, slope=0.1, effect=0.5):
    """Stage-2 rewards exactly linear in the stage-2 design, so the stage-2
    residual variance vanishes and no shrinkage occurs."""
    spec = two_stage_spec()
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n):
        x1 = float(rng.normal())
        a1 = int(rng.integers(1, 3))
        code1 = 1.0 if a1 == 1 else -1.0
        y1 = 1.0 + 0.5 * x1 + 0.2 * code1
        a2 = int(rng.integers(1, 3))
        code2 = 1.0 if a2 == 1 else -1.0
        y2 = 2.0 + 0.3 * x1 + code2 * (effect + slope * x1)
        trajs.append(Trajectory((StageRecord((x1,), a1, y1),
                                 StageRecord((x1,), a2, y2))))
    return Dataset(tuple(trajs), spec)


def stage2_fit(ds):
    rows2 = np.flatnonzero(present_mask(ds, 2))
    B2, y2 = design_rows(ds, 2, rows2)
    return fit_ols(B2, y2)


class TestPpeStatistic:
    def test_matches_direct_formula(self):
        ds = two_stage_dataset(12, 30, coding2="indicator")
        fit = fit_qlearning(ds)
        rng = np.random.default_rng(8)
        ref1 = fit.stages[0].ols.beta + rng.normal(size=3) * 0.3
        ref2 = fit.stages[1].ols.beta + rng.normal(size=4) * 0.3
        c = np.array([0.5, -1.0, 2.0])
        for lam in (0.0, 1.0, 3.0, np.inf):
            want = naive_ppe(ds, fit, ref1, ref2, lam, c)
            got = ppe_statistic(ds, fit, (ref1, ref2), lam, c)
            assert got == pytest.approx(want, abs=1e-9 * max(1.0, abs(want)))

    def test_zero_at_own_fit(self):
        ds = two_stage_dataset(3, 40)
        fit = fit_qlearning(ds)
        center = (fit.stages[0].ols.beta, fit.stages[1].ols.beta)
        c = np.array([1.0, 0.0, -1.0])
        for lam in (0.0, 1.0, np.inf):
            assert ppe_statistic(ds, fit, center, lam, c) == pytest.approx(0.0, abs=1e-8)

    def test_all_rejected_equals_bounds(self):
        ds = two_stage_dataset(6, 35, coding2="indicator")
        fit = fit_qlearning(ds)
        rng = np.random.default_rng(1)
        ref1 = fit.stages[0].ols.beta + rng.normal(size=3) * 0.2
        ref2 = fit.stages[1].ols.beta + rng.normal(size=4) * 0.2
        c = np.array([1.0, 1.0, 0.0])
        b = bounds_two_stage(ds, fit, (ref1, ref2), 0.0, c,
                             GammaSearch(n_gamma=50, rng_seed=2))
        got = ppe_statistic(ds, fit, (ref1, ref2), 0.0, c)
        assert b.upper == b.lower
        assert got == pytest.approx(b.upper, abs=1e-10 * max(1.0, abs(b.upper)))

    def test_equals_bounds_at_zero_candidate(self):
        """With the reference interaction block zeroed the candidate box
        collapses onto the zero shift, so the bounds pinch to the plug-in
        pretesting value."""
        ds = two_stage_dataset(9, 40, coding2="indicator")
        fit = fit_qlearning(ds)
        ref1 = fit.stages[0].ols.beta * 0.9
        ref2 = fit.stages[1].ols.beta.copy()
        ref2[2:] = 0.0
        c = np.array([0.0, 1.0, 1.0])
        lam = 1.5
        b = bounds_two_stage(ds, fit, (ref1, ref2), lam, c, ZERO_BOX)
        got = ppe_statistic(ds, fit, (ref1, ref2), lam, c)
        scale = max(1.0, abs(got))
        assert b.upper == pytest.approx(got, abs=1e-8 * scale)
        assert b.lower == pytest.approx(got, abs=1e-8 * scale)

    def test_rejects_three_stage_fit(self):
        ds = three_stage_dataset(0, 40)
        fit = fit_qlearning(ds)
        with pytest.raises(UnsupportedMethodError):
            ppe_statistic(ds, fit, tuple(s.ols.beta for s in fit.stages),
                          1.0, np.zeros(3))


class TestPpeInterval:
    def test_deterministic_and_ordered(self):
        ds = two_stage_dataset(4, 30)
        fit = fit_qlearning(ds)
        c = np.array([1.0, 0.0, 0.0])
        rule = parse_lambda_rule("loglog")
        a = ppe_interval(ds, fit, c, rule, BootstrapPlan(n_boot=16, seed=3))
        b = ppe_interval(ds, fit, c, rule, BootstrapPlan(n_boot=16, seed=3))
        other = ppe_interval(ds, fit, c, rule, BootstrapPlan(n_boot=16, seed=4))
        assert a == b
        assert a.lo <= a.hi
        assert a.method == "ppe"
        assert (a.lo, a.hi) != (other.lo, other.hi)


class TestStPseudoOutcome:
    def test_matches_printed_formula_n150(self):
        ds = two_stage_dataset(7, 150)
        f2 = stage2_fit(ds)
        got = st_pseudo_outcome(ds, f2)
        y1 = np.array([t.stages[0].reward for t in ds.trajectories])
        sd2 = ds.spec.stages[1]
        rows2 = np.flatnonzero(present_mask(ds, 2))
        H0 = feature_matrix(ds, sd2.main, rows2)
        H1 = feature_matrix(ds, sd2.interact, rows2)
        cov_int = f2.cov_beta_scaled[2:, 2:]
        want = y1.copy()
        for k, u in enumerate(rows2):
            h = H1[k]
            mag = abs(h @ f2.beta[2:])
            factor = max(1.0 - 3.0 * (h @ cov_int @ h) / (f2.n * mag), 0.0)
            want[u] += H0[k] @ f2.beta[:2] + mag * factor
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_no_shrinkage_when_cov_zero(self):
        ds = exact_stage2_dataset()
        f2 = stage2_fit(ds)
        assert f2.sigma2 == pytest.approx(0.0, abs=1e-20)
        got = st_pseudo_outcome(ds, f2)
        y1 = np.array([t.stages[0].reward for t in ds.trajectories])
        x = np.array([t.stages[0].covariates[0] for t in ds.trajectories])
        want = y1 + (2.0 + 0.3 * x) + np.abs(0.5 + 0.1 * x)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_small_effect_fully_clamped(self):
        ds = two_stage_dataset(2, 20)
        real = stage2_fit(ds)
        beta = real.beta.copy()
        beta[2:] = [1e-8, 0.0]
        fake = OlsFit(beta=beta, gram=real.gram, gram_inv=real.gram_inv,
                      sigma2=1.0, n=real.n,
                      cov_beta_scaled=np.eye(4) * 100.0)
        got = st_pseudo_outcome(ds, fake)
        y1 = np.array([t.stages[0].reward for t in ds.trajectories])
        sd2 = ds.spec.stages[1]
        rows2 = np.flatnonzero(present_mask(ds, 2))
        H0 = feature_matrix(ds, sd2.main, rows2)
        want = y1.copy()
        want[rows2] += H0 @ beta[:2]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_squared_denominator_variant(self):
        ds = two_stage_dataset(11, 40)
        f2 = stage2_fit(ds)
        got = st_pseudo_outcome(ds, f2, denominator="squared")
        y1 = np.array([t.stages[0].reward for t in ds.trajectories])
        sd2 = ds.spec.stages[1]
        rows2 = np.flatnonzero(present_mask(ds, 2))
        H0 = feature_matrix(ds, sd2.main, rows2)
        H1 = feature_matrix(ds, sd2.interact, rows2)
        cov_int = f2.cov_beta_scaled[2:, 2:]
        want = y1.copy()
        for k, u in enumerate(rows2):
            h = H1[k]
            val = h @ f2.beta[2:]
            factor = max(1.0 - 3.0 * (h @ cov_int @ h) / (f2.n * val ** 2), 0.0)
            want[u] += H0[k] @ f2.beta[:2] + abs(val) * factor
        np.testing.assert_allclose(got, want, atol=1e-10)
        with pytest.raises(ValueError):
            st_pseudo_outcome(ds, f2, denominator="cubed")

    def test_unsupported_designs(self):
        ternary = two_stage_dataset(0, 30, coding2=TERNARY_CODING, k2=3)
        with pytest.raises(UnsupportedMethodError):
            st_pseudo_outcome(ternary, stage2_fit(ternary))
        indicator = two_stage_dataset(0, 30, coding2="indicator")
        with pytest.raises(UnsupportedMethodError):
            st_pseudo_outcome(indicator, stage2_fit(indicator))
        three = three_stage_dataset(0, 40)
        with pytest.raises(UnsupportedMethodError):
            st_pseudo_outcome(three, stage2_fit(three))


class TestStInterval:
    def test_zero_width_on_exact_data(self):
        ds = exact_stage2_dataset(effect=0.0, slope=0.0)
        c = np.array([0.0, 0.0, 1.0])
        iv = st_interval(ds, c, BootstrapPlan(n_boot=16, seed=0))
        assert iv.method == "st"
        assert iv.hi - iv.lo == pytest.approx(0.0, abs=1e-9)

    def test_deterministic(self):
        ds = two_stage_dataset(5, 35)
        c = np.array([1.0, 0.0, 0.0])
        a = st_interval(ds, c, BootstrapPlan(n_boot=20, seed=9))
        b = st_interval(ds, c, BootstrapPlan(n_boot=20, seed=9))
        assert a == b
        assert a.lo <= a.hi


class TestToyEstimates:
    def test_zero_threshold_reduces_to_mle(self):
        mle, soft, hard = toy_estimates(1.0, 2.0, 0.0)
        assert mle.value == soft.value == hard.value == 2.0

    def test_thresholded_below(self):
        mle, soft, hard = toy_estimates(0.0, 2.0, 4.0)
        assert mle.value == 2.0
        assert soft.value == 1.0
        assert hard.value == 1.0

    def test_tied_arms(self):
        for lam in (0.0, 1.0, 7.0):
            for est in toy_estimates(3.0, 3.0, lam):
                assert est.value == 3.0

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            toy_estimates(0.0, 1.0, -0.5)
        with pytest.raises(ValueError):
            ToyEstimate("mle", 0.0, -1.0)
        with pytest.raises(ValueError):
            ToyEstimate("ridge", 0.0, 1.0)

    @given(x1=st.floats(-1e6, 1e6), x2=st.floats(-1e6, 1e6),
           lam=st.floats(0.0, 1e6))
    @settings(max_examples=200, deadline=None)
    def test_order_and_structure(self, x1, x2, lam):
        mle, soft, hard = toy_estimates(x1, x2, lam)
        mid = 0.5 * (x1 + x2)
        assert soft.value <= mle.value
        assert hard.value in (mid, mle.value)
        assert mle.value == pytest.approx(max(x1, x2), rel=1e-12, abs=1e-9)


class TestToySweep:
    def test_mle_bias_at_tied_means(self):
        rows = toy_sweep([0.0], [0.0], reps=100_000, seed=0)
        mle = next(r for r in rows if r["method"] == "mle")
        assert mle["bias"] == pytest.approx(1.0 / math.sqrt(math.pi), abs=0.01)

    def test_mle_bias_vanishes_at_large_gap(self):
        rows = toy_sweep([6.0], [1.0], reps=100_000, seed=1)
        mle = next(r for r in rows if r["method"] == "mle")
        assert mle["bias"] == pytest.approx(0.0, abs=0.01)

    def test_hard_at_zero_threshold_equals_mle(self):
        rows = toy_sweep([0.5, 2.0], [0.0, 1.5], reps=4000, seed=2)
        for mu in (0.5, 2.0):
            cell = [r for r in rows if r["mu_diff"] == mu and r["lambda"] == 0.0]
            mle = next(r for r in cell if r["method"] == "mle")
            hard = next(r for r in cell if r["method"] == "hard")
            assert hard["bias"] == mle["bias"]
            assert hard["mse"] == mle["mse"]

    def test_grid_shape_and_validation(self):
        rows = toy_sweep([0.0, 1.0, 2.0], [0.5, 1.0], reps=10, seed=3)
        assert len(rows) == 3 * 2 * 3
        assert set(rows[0]) == {"method", "mu_diff", "lambda", "bias", "mse",
                                "reps", "mc_se"}
        assert rows == toy_sweep([0.0, 1.0, 2.0], [0.5, 1.0], reps=10, seed=3)
        with pytest.raises(ValueError):
            toy_sweep([0.0], [1.0], reps=0)
        with pytest.raises(ValueError):
            toy_sweep([0.0], [-1.0], reps=5)

    def test_soft_never_biased_above_mle(self):
        rows = toy_sweep([0.0, 1.0], [0.5, 2.0], reps=2000, seed=4)
        for mu in (0.0, 1.0):
            for lam in (0.5, 2.0):
                cell = [r for r in rows if r["mu_diff"] == mu and r["lambda"] == lam]
                by = {r["method"]: r["bias"] for r in cell}
                assert by["soft"] <= by["mle"]
                assert by["hard"] <= by["mle"]
