"""Ordinary least squares with the scaled-covariance conventions used by the
stage regressions and the pretest statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "OlsFit",
    "SingularDesignError",
    "fit_ols",
    "interaction_cov",
    "pairwise_cov",
]

_COND_LIMIT = 1e10


class SingularDesignError(ValueError):
    """Design matrix is rank deficient or numerically unusable."""


@dataclass(frozen=True, eq=False)
class OlsFit:
    """Fitted regression of y on B.

    gram is the empirical second-moment matrix B'B/n, gram_inv its inverse
    scaled back by n (so gram_inv = n (B'B)^{-1}), sigma2 the residual
    variance with divisor n, and cov_beta_scaled = sigma2 * gram_inv, the
    plug-in covariance of sqrt(n) (beta_hat - beta).
    """

    beta: np.ndarray
    gram: np.ndarray
    gram_inv: np.ndarray
    sigma2: float
    n: int
    cov_beta_scaled: np.ndarray


def fit_ols(B: np.ndarray, y: np.ndarray) -> OlsFit:
    """Least squares via an orthogonal decomposition of B.

    Requires n >= p; raises SingularDesignError when the triangular factor's
    condition number reaches 1e10.
    """
    B = np.asarray(B, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if B.ndim != 2:
        raise ValueError("B must be a 2-d array")
    n, p = B.shape
    if len(y) != n:
        raise ValueError("y length does not match B")
    if n < p:
        raise SingularDesignError(f"need at least {p} rows, got {n}")
    Q, R = np.linalg.qr(B)
    diag = np.abs(np.diag(R))
    if diag.min() == 0.0 or diag.max() / diag.min() >= _COND_LIMIT:
        raise SingularDesignError("design matrix is numerically singular")
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - B @ beta
    sigma2 = float(resid @ resid) / n
    gram = (B.T @ B) / n
    # gram_inv = n (B'B)^{-1} = (R'R/n)^{-1} via two triangular solves
    Rinv = np.linalg.solve(R, np.eye(p))
    gram_inv = n * (Rinv @ Rinv.T)
    cov = sigma2 * gram_inv
    return OlsFit(beta=beta, gram=gram, gram_inv=gram_inv, sigma2=sigma2, n=n,
                  cov_beta_scaled=cov)


def interaction_cov(fit: OlsFit, block: slice | np.ndarray) -> np.ndarray:
    """Sub-block of cov_beta_scaled for the given coefficient index set."""
    if isinstance(block, slice):
        return fit.cov_beta_scaled[block, block]
    idx = np.asarray(block)
    return fit.cov_beta_scaled[np.ix_(idx, idx)]


def _block_indices(block: slice | range | np.ndarray, p: int) -> np.ndarray:
    if isinstance(block, slice):
        idx = np.arange(p)[block]
    else:
        idx = np.asarray(block, dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= p:
        raise IndexError("block indices out of range")
    return idx


def pairwise_cov(fit: OlsFit | np.ndarray, i: slice | range | np.ndarray,
                 j: slice | range | np.ndarray) -> np.ndarray:
    """Scaled covariance of the difference between two coefficient blocks:
    cov_ii - 2 cov_ij + cov_jj. Identical blocks give an exact zero matrix.

    Accepts a raw scaled covariance matrix in place of a fit, which lets
    callers work with stacked per-treatment effective coefficients.
    """
    cov = fit.cov_beta_scaled if isinstance(fit, OlsFit) else np.asarray(fit, dtype=float)
    p = cov.shape[0]
    bi = _block_indices(i, p)
    bj = _block_indices(j, p)
    if len(bi) != len(bj):
        raise ValueError("blocks must have equal length")
    if np.array_equal(bi, bj):
        return np.zeros((len(bi), len(bi)))
    return (cov[np.ix_(bi, bi)] - 2.0 * cov[np.ix_(bi, bj)] + cov[np.ix_(bj, bj)])
