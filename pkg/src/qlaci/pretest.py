"""Pretest statistics deciding, per feature vector, whether the data can
distinguish the best treatment from its competitors; near-best treatment-set
estimators; and the tuning schedules for the acceptance threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .linreg import pairwise_cov

__all__ = [
    "LambdaRule",
    "TreatSet",
    "lambda_value",
    "parse_lambda_rule",
    "pretest_binary",
    "pretest_multi",
    "rule_text",
    "stacked_effective_cov",
    "treat_set",
    "zeta_from_stacked",
]

_KINDS = ("sqrt_loglog", "loglog", "log", "sqrt_n", "linear_n", "fixed")


@dataclass(frozen=True)
class LambdaRule:
    """Threshold schedule; kind 'fixed' carries an explicit positive value."""

    kind: str
    value: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown lambda rule {self.kind!r}")
        if self.kind == "fixed":
            if self.value is None or not self.value > 0:
                raise ValueError("fixed rule needs a positive value")
        elif self.value is not None:
            raise ValueError(f"rule {self.kind!r} takes no value")


def parse_lambda_rule(text: str) -> LambdaRule:
    """Parse the config-file spelling: sqrt_loglog|loglog|log|sqrt_n|n|fixed:<v>."""
    text = text.strip()
    if text.startswith("fixed:"):
        return LambdaRule("fixed", float(text[len("fixed:"):]))
    if text == "n":
        return LambdaRule("linear_n")
    return LambdaRule(text)


def rule_text(rule: LambdaRule) -> str:
    """Config-file spelling of a rule; inverse of parse_lambda_rule."""
    if rule.kind == "fixed":
        return f"fixed:{rule.value:g}"
    return "n" if rule.kind == "linear_n" else rule.kind


def lambda_value(rule: LambdaRule, n: float) -> float:
    """Evaluate the schedule at sample size n; logarithmic rules need n >= 3
    so the value is positive."""
    if rule.kind == "fixed":
        return float(rule.value)
    if rule.kind in ("sqrt_loglog", "loglog", "log") and n < 3:
        raise ValueError(f"rule {rule.kind} needs n >= 3, got {n}")
    if rule.kind == "sqrt_loglog":
        return math.sqrt(math.log(math.log(n)))
    if rule.kind == "loglog":
        return math.log(math.log(n))
    if rule.kind == "log":
        return math.log(n)
    if rule.kind == "sqrt_n":
        return math.sqrt(n)
    return float(n)


def _ratio(num: float, den: float) -> float:
    # 0/0 := 0; a positive numerator over a degenerate denominator is +inf
    if den < 0.0:
        raise ValueError("pretest denominator is negative; covariance not PSD")
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def pretest_binary(h: np.ndarray, beta21: np.ndarray, cov21: np.ndarray, n: int) -> float:
    """Standardized effect-size statistic n (h'b)^2 / (h' S h) for the single
    interaction coefficient block of a binary-treatment stage."""
    h = np.asarray(h, dtype=float)
    v = float(h @ np.asarray(beta21, dtype=float))
    den = float(h @ np.asarray(cov21, dtype=float) @ h)
    return _ratio(n * v * v, den)


def stacked_effective_cov(cov_int: np.ndarray, coding: np.ndarray) -> np.ndarray:
    """Scaled covariance of the stacked per-treatment effective interaction
    coefficients (e_1, ..., e_K), e_i = sum_j C[i,j] b_j, from the covariance
    of the base blocks (b_1, ..., b_m)."""
    coding = np.asarray(coding, dtype=float)
    d = cov_int.shape[0] // coding.shape[1]
    M = np.kron(coding, np.eye(d))
    return M @ cov_int @ M.T


def zeta_from_stacked(stacked_cov: np.ndarray, d: int) -> Callable[[int, int], np.ndarray]:
    """Pairwise-difference covariance provider over a stacked effective
    covariance with K blocks of size d."""
    def zeta(i: int, j: int) -> np.ndarray:
        return pairwise_cov(stacked_cov, range(i * d, (i + 1) * d),
                            range(j * d, (j + 1) * d))
    return zeta


def pretest_multi(h: np.ndarray, betas: Sequence[np.ndarray] | np.ndarray,
                  zeta: Callable[[int, int], np.ndarray], n: int) -> np.ndarray:
    """One statistic per treatment comparing it with the best competitor.

    betas holds the K effective coefficient vectors; zeta(i, j) returns the
    scaled covariance of e_i - e_j (0-based), built as if the best competitor
    index were known in advance. Competitor ties break to the lowest index.
    """
    V = np.asarray(betas, dtype=float)
    h = np.asarray(h, dtype=float)
    K = V.shape[0]
    if K == 1:
        return np.zeros(1)
    vals = V @ h
    out = np.empty(K)
    for i in range(K):
        others = [j for j in range(K) if j != i]
        k_hat = max(others, key=lambda j: (vals[j], -j))
        num = n * (vals[i] - vals[k_hat]) ** 2
        den = float(h @ zeta(i, k_hat) @ h)
        out[i] = _ratio(num, den)
    return out


@dataclass(frozen=True)
class TreatSet:
    """Estimated set of treatments statistically tied with the best."""

    indices: tuple[int, ...]
    min_stat: float

    def __post_init__(self) -> None:
        if not self.indices:
            raise ValueError("treatment set cannot be empty")


def treat_set(h: np.ndarray, betas: Sequence[np.ndarray] | np.ndarray,
              stats: np.ndarray, lam: float) -> TreatSet:
    """All treatments whose statistic clears the threshold; when none does,
    the single empirical best (lowest code on ties)."""
    stats = np.asarray(stats, dtype=float)
    min_stat = float(stats.min())
    if min_stat <= lam:
        idx = tuple(int(i) + 1 for i in np.flatnonzero(stats <= lam))
    else:
        vals = np.asarray(betas, dtype=float) @ np.asarray(h, dtype=float)
        idx = (int(np.argmax(vals)) + 1,)
    return TreatSet(indices=idx, min_stat=min_stat)
