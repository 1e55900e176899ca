"""Competitor interval methods and toy thresholding estimators.

The plug-in pretesting (PPE) statistic is the bound evaluation with the
local-shift candidate pinned at zero, so it shares all kernel code with the
adaptive bounds. Soft-thresholding (ST) shrinks the stage-2 interaction
contribution of the pseudo-outcome before refitting stage 1, and works for
the two-stage binary +1/-1 design only. The toy estimators are the scalar
two-arm analogues used for bias and mean squared error sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bounds import _two_stage_inputs, eval_two_stage, prep_two_stage
from .dataio import Dataset, design_rows, feature_matrix, present_mask
from .linreg import OlsFit, fit_ols
from .pretest import LambdaRule, lambda_value
from .qlearn import QFit, fit_qlearning
from .resample import (BootstrapPlan, Interval, _bootstrap_values,
                       cpb_interval, quantile)

__all__ = [
    "ToyEstimate",
    "UnsupportedMethodError",
    "ppe_interval",
    "ppe_statistic",
    "st_interval",
    "st_pseudo_outcome",
    "toy_estimates",
    "toy_sweep",
]


class UnsupportedMethodError(ValueError):
    """The method is not defined for this design shape."""


def ppe_statistic(ds: Dataset, fit: QFit, center, lam: float,
                  c: np.ndarray) -> float:
    """Plug-in pretesting statistic for c' sqrt(n) (beta_hat_1 - ref_1).

    Rejected units contribute the plug-in max error, accepted units the
    positive-part kernel at local shift zero. Equals either bound evaluated
    over the single-candidate set {0}.
    """
    if fit.n_stages != 2:
        raise UnsupportedMethodError("ppe_statistic needs a two-stage fit")
    st1, st2, B1, y1, present, H20, H21 = _two_stage_inputs(ds, fit)
    ref1, ref2 = (np.asarray(r, dtype=float) for r in center)
    prep = prep_two_stage(
        c, B1=B1, y1=y1, fit1=st1.ols, present=present, H20=H20, H21=H21,
        fit2=st2.ols, n_main2=st2.n_main, coding2=st2.design.coding,
        ref1=ref1, ref2=ref2, box_multiplier=1.0)
    res = eval_two_stage(prep, np.zeros((1, len(prep.center_int))), lam)
    return res.upper


def ppe_interval(ds: Dataset, fit: QFit, c: np.ndarray, lambda_rule: LambdaRule,
                 plan: BootstrapPlan, alpha: float = 0.05) -> Interval:
    """Bootstrap the PPE statistic centered at the original coefficients and
    invert, mirroring the adaptive interval's assembly and seeding."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    c = np.asarray(c, dtype=float)
    n = ds.n
    lam = lambda_value(lambda_rule, n)
    center = tuple(st.ols.beta for st in fit.stages)

    def one(ds_b: Dataset, _gamma_seed) -> float:
        return ppe_statistic(ds_b, fit_qlearning(ds_b), center, lam, c)

    vals, n_redraws = _bootstrap_values(ds, plan, one)
    point = float(c @ fit.stages[0].ols.beta)
    sqrt_n = math.sqrt(n)
    return Interval(lo=point - quantile(vals, 1.0 - alpha / 2.0) / sqrt_n,
                    hi=point - quantile(vals, alpha / 2.0) / sqrt_n,
                    nominal=1.0 - alpha, method="ppe", n_redraws=n_redraws)


def _require_st_design(ds: Dataset) -> None:
    if ds.spec.n_stages != 2:
        raise UnsupportedMethodError("soft-thresholding is two-stage only")
    sd2 = ds.spec.stages[1]
    if sd2.n_treatments != 2:
        raise UnsupportedMethodError("soft-thresholding is binary only")
    codes = np.sort(sd2.coding.ravel())
    if sd2.coding.shape != (2, 1) or not np.array_equal(codes, [-1.0, 1.0]):
        raise UnsupportedMethodError(
            "soft-thresholding requires the +1/-1 binary coding")


def st_pseudo_outcome(ds: Dataset, fit2: OlsFit,
                      denominator: str = "abs") -> np.ndarray:
    """Shrunken stage-1 pseudo-outcome, one value per trajectory.

    The stage-2 interaction magnitude |h'b| enters through a positive-part
    shrinkage factor; with denominator="abs" the term is the soft threshold
    (|h'b| - 3 h'Sh/n)+, with "squared" the factor divides by n (h'b)^2
    instead. Units without a stage-2 record keep their raw reward.
    """
    _require_st_design(ds)
    if denominator not in ("abs", "squared"):
        raise ValueError("denominator must be 'abs' or 'squared'")
    sd2 = ds.spec.stages[1]
    n_main = len(sd2.main)
    rows2 = np.flatnonzero(present_mask(ds, 2))
    H20 = feature_matrix(ds, sd2.main, rows2)
    H21 = feature_matrix(ds, sd2.interact, rows2)
    a = H21 @ fit2.beta[n_main:]
    cov_int = fit2.cov_beta_scaled[n_main:, n_main:]
    q = 3.0 * np.einsum("ud,dh,uh->u", H21, cov_int, H21) / fit2.n
    if denominator == "abs":
        term = np.maximum(np.abs(a) - q, 0.0)
    else:
        with np.errstate(divide="ignore"):
            factor = np.where(a != 0.0,
                              np.maximum(1.0 - q / np.where(a != 0.0, a, 1.0) ** 2, 0.0),
                              0.0)
        term = np.abs(a) * factor
    out = np.array([t.stages[0].reward for t in ds.trajectories], dtype=float)
    out[rows2] += H20 @ fit2.beta[:n_main] + term
    return out


def st_interval(ds: Dataset, c: np.ndarray, plan: BootstrapPlan,
                alpha: float = 0.05, denominator: str = "abs") -> Interval:
    """Centered percentile bootstrap of c' beta_1 with beta_1 refit on the
    shrunken pseudo-outcome."""
    c = np.asarray(c, dtype=float)

    def statistic(d: Dataset) -> float:
        rows2 = np.flatnonzero(present_mask(d, 2))
        B2, y2 = design_rows(d, 2, rows2)
        f2 = fit_ols(B2, y2)
        ytil = st_pseudo_outcome(d, f2, denominator)
        B1, _ = design_rows(d, 1, np.arange(d.n))
        return float(c @ fit_ols(B1, ytil).beta)

    return cpb_interval(ds, statistic, plan, alpha, method="st")


@dataclass(frozen=True)
class ToyEstimate:
    method: str
    value: float
    threshold: float

    def __post_init__(self) -> None:
        if self.method not in ("mle", "soft", "hard"):
            raise ValueError("method must be mle, soft, or hard")
        if self.threshold < 0.0:
            raise ValueError("threshold cannot be negative")


def _toy_values(x1, x2, lam):
    mid = 0.5 * (x1 + x2)
    gap = np.abs(x1 - x2)
    mle = mid + 0.5 * gap
    soft = mid + 0.5 * np.maximum(gap - lam, 0.0)
    hard = np.where(gap >= lam, mle, mid)
    return mle, soft, hard


def toy_estimates(x1: float, x2: float, lam: float) -> tuple[ToyEstimate, ...]:
    """Maximum, soft-thresholded, and hard-thresholded estimates of
    max(mu_1, mu_2) from a single observation pair."""
    if lam < 0.0:
        raise ValueError("threshold cannot be negative")
    mle, soft, hard = _toy_values(float(x1), float(x2), lam)
    return (ToyEstimate("mle", float(mle), lam),
            ToyEstimate("soft", float(soft), lam),
            ToyEstimate("hard", float(hard), lam))


def toy_sweep(mu_grid, lambda_grid, reps: int, seed: int = 0) -> list[dict]:
    """Monte Carlo bias and MSE of the toy estimators over a grid.

    Each grid cell draws X1 ~ N(mu_diff, 1), X2 ~ N(0, 1) under its own
    derived seed; the three methods share the cell's draws so within-cell
    comparisons are exact. Rows carry method, mu_diff, lambda, bias, mse,
    reps, mc_se.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    lambda_grid = [float(l) for l in lambda_grid]
    if any(l < 0.0 for l in lambda_grid):
        raise ValueError("threshold cannot be negative")
    rows = []
    for i, mu in enumerate(float(m) for m in mu_grid):
        truth = max(mu, 0.0)
        for j, lam in enumerate(lambda_grid):
            rng = np.random.default_rng(np.random.SeedSequence((seed, i, j)))
            x1 = rng.normal(mu, 1.0, size=reps)
            x2 = rng.normal(0.0, 1.0, size=reps)
            for method, est in zip(("mle", "soft", "hard"),
                                   _toy_values(x1, x2, lam)):
                err = est - truth
                rows.append({
                    "method": method,
                    "mu_diff": mu,
                    "lambda": lam,
                    "bias": float(err.mean()),
                    "mse": float(np.mean(err ** 2)),
                    "reps": reps,
                    "mc_se": float(np.std(est, ddof=1) / math.sqrt(reps))
                             if reps > 1 else 0.0,
                })
    return rows
