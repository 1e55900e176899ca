"""Bootstrap engine and interval assembly.

Replicates are seeded hierarchically from (master seed, replicate index,
attempt), so parallel and serial execution, and different interval methods
run against the same plan, all see identical resamples. A replicate whose
refit hits a singular design is redrawn under the next attempt number, up
to a cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .bounds import GammaSearch, bounds_general, bounds_two_stage
from .dataio import Dataset, subset
from .linreg import SingularDesignError
from .pretest import LambdaRule, lambda_value
from .qlearn import QFit, fit_qlearning

__all__ = [
    "BootstrapPlan",
    "Interval",
    "RedrawLimitError",
    "aci_interval",
    "cpb_interval",
    "quantile",
    "resample",
]


class RedrawLimitError(RuntimeError):
    """A bootstrap replicate stayed singular past the redraw cap."""


@dataclass(frozen=True)
class BootstrapPlan:
    """How many replicates to draw, under which master seed, and how many
    times a singular replicate may be redrawn before giving up."""

    n_boot: int = 1000
    seed: int = 0
    max_redraws: int = 25

    def __post_init__(self) -> None:
        if self.n_boot < 1:
            raise ValueError("n_boot must be at least 1")
        if self.max_redraws < 0:
            raise ValueError("max_redraws cannot be negative")


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    nominal: float
    method: str
    n_redraws: int = 0

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError("interval endpoints are out of order")


def resample(ds: Dataset, seed) -> Dataset:
    """n trajectories drawn with replacement, deterministic under seed."""
    rng = np.random.default_rng(seed)
    n = len(ds.trajectories)
    return subset(ds, rng.integers(0, n, size=n))


def quantile(values: Sequence[float], q: float) -> float:
    """Ascending order statistic at rank ceil(q * B).

    The rank is computed with a small guard so that products like
    0.025 * 1000 land on the intended integer despite float rounding.
    """
    vals = np.sort(np.asarray(values, dtype=float))
    B = len(vals)
    if B == 0:
        raise ValueError("quantile of empty input")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    k = math.ceil(q * B - 1e-9)
    return float(vals[min(max(k, 1), B) - 1])


def _attempt_seeds(seed: int, b: int, attempt: int):
    ss = np.random.SeedSequence((seed, b, attempt))
    idx_child, gamma_child = ss.spawn(2)
    return np.random.default_rng(idx_child), gamma_child


def _bootstrap_values(ds: Dataset, plan: BootstrapPlan,
                      evaluate: Callable[[Dataset, np.random.SeedSequence], tuple]):
    """Run the replicate loop, redrawing singular replicates. evaluate gets
    the resampled dataset plus a per-attempt seed and returns a value tuple."""
    out = []
    n_redraws = 0
    for b in range(plan.n_boot):
        for attempt in range(plan.max_redraws + 1):
            rng, gamma_seed = _attempt_seeds(plan.seed, b, attempt)
            ds_b = resample(ds, rng)
            try:
                out.append(evaluate(ds_b, gamma_seed))
            except SingularDesignError:
                n_redraws += 1
                continue
            break
        else:
            raise RedrawLimitError(
                f"replicate {b} stayed singular after {plan.max_redraws} redraws")
    return out, n_redraws


def aci_interval(ds: Dataset, fit: QFit, c: np.ndarray, lambda_rule: LambdaRule,
                 search: GammaSearch, plan: BootstrapPlan,
                 alpha: float = 0.05) -> Interval:
    """Adaptive confidence interval for c' beta_1.

    Each replicate refits on a resample and evaluates the upper/lower
    bounds centered at the original sample's coefficients; the interval is
    [c'beta_hat_1 - u_hat/sqrt(n), c'beta_hat_1 - l_hat/sqrt(n)] with u_hat
    and l_hat bootstrap quantiles of the bounds. The pretest threshold is
    computed once from the original sample size and held fixed.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    c = np.asarray(c, dtype=float)
    n = len(ds.trajectories)
    lam = lambda_value(lambda_rule, n)
    center = tuple(st.ols.beta for st in fit.stages)
    two_stage = fit.n_stages == 2

    def one(ds_b: Dataset, gamma_seed) -> tuple[float, float]:
        fit_b = fit_qlearning(ds_b)
        search_b = replace(search, rng_seed=gamma_seed)
        if two_stage:
            res = bounds_two_stage(ds_b, fit_b, center, lam, c, search_b)
        else:
            res = bounds_general(ds_b, fit_b, center, lam, c, 1, search_b)
        return res.upper, res.lower

    vals, n_redraws = _bootstrap_values(ds, plan, one)
    uppers = [u for u, _ in vals]
    lowers = [l for _, l in vals]
    u_hat = quantile(uppers, 1.0 - alpha / 2.0)
    l_hat = quantile(lowers, alpha / 2.0)
    point = float(c @ fit.stages[0].ols.beta)
    sqrt_n = math.sqrt(n)
    return Interval(lo=point - u_hat / sqrt_n, hi=point - l_hat / sqrt_n,
                    nominal=1.0 - alpha, method="aci", n_redraws=n_redraws)


def cpb_interval(ds: Dataset, statistic: Callable[[Dataset], float],
                 plan: BootstrapPlan, alpha: float = 0.05,
                 method: str = "cpb") -> Interval:
    """Centered percentile bootstrap for any resample-evaluable statistic:
    [theta_hat - q_{1-a/2}(D), theta_hat - q_{a/2}(D)] with
    D = theta_hat_boot - theta_hat."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    theta = float(statistic(ds))

    def one(ds_b: Dataset, _gamma_seed) -> float:
        return float(statistic(ds_b)) - theta

    diffs, n_redraws = _bootstrap_values(ds, plan, one)
    return Interval(lo=theta - quantile(diffs, 1.0 - alpha / 2.0),
                    hi=theta - quantile(diffs, alpha / 2.0),
                    nominal=1.0 - alpha, method=method, n_redraws=n_redraws)
