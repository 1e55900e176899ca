"""Smooth upper and lower bounds on c' sqrt(n) (beta_hat_1 - beta_ref_1).

The first-stage estimation error decomposes into a smooth average plus a
non-smooth term driven by the best-treatment max at later stages. Each unit
is pretested: units where one treatment is clearly best contribute their
plug-in error; the remaining units contribute a kernel

    max_i H'(V_i + g_i) - max_i H'g_i

whose local-alternative shift g is searched over a stochastic candidate set,
with the supremum giving the upper bound and the infimum the lower bound.
Bootstrap calls pass the bootstrap sample with the original coefficients as
the reference center; everything else is recomputed from the passed sample.

Two-stage problems use the direct form below; bounds_general evaluates the
recursive bound process for up to three stages by propagating, per
candidate, the full next-stage coefficient process.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import Dataset, design_rows, feature_matrix
from .pretest import stacked_effective_cov, zeta_from_stacked
from .qlearn import QFit

__all__ = [
    "BoundsResult",
    "GammaSearch",
    "TwoStagePrep",
    "bounds_general",
    "bounds_two_stage",
    "draw_candidates",
    "eval_two_stage",
    "prep_two_stage",
    "smooth_term",
]


@dataclass(frozen=True)
class GammaSearch:
    """Stochastic search settings for the local-alternative shift.

    Candidates are drawn uniformly from a hypercube centered at the scaled
    reference interaction coefficients, with per-coordinate half-width
    box_halfwidth_multiplier times the scaled standard error.
    include_center adds the exact center as one more candidate.
    """

    n_gamma: int = 1000
    box_halfwidth_multiplier: float = 5.0
    include_center: bool = True
    rng_seed: int | np.random.SeedSequence | None = 0

    def __post_init__(self) -> None:
        if self.n_gamma < 1:
            raise ValueError("n_gamma must be at least 1")
        if not self.box_halfwidth_multiplier > 0:
            raise ValueError("box_halfwidth_multiplier must be positive")


@dataclass(frozen=True, eq=False)
class BoundsResult:
    """One evaluation of the bounds.

    gamma_at_sup / gamma_at_inf are the candidates attaining the extremes,
    in the scaled base interaction space (stacked across stages for the
    general form). accept_fraction counts pretest-accepted units among those
    with a next-stage record. smooth_part and plug_part are diagnostics:
    the smooth average and the pretest-rejected plug-in term as assembled
    by the code path that produced the result.
    """

    upper: float
    lower: float
    gamma_at_sup: np.ndarray
    gamma_at_inf: np.ndarray
    accept_fraction: float
    smooth_part: float
    plug_part: float


def _eval_terms_max(H0: np.ndarray, H1: np.ndarray, beta_main: np.ndarray,
                    eff: np.ndarray) -> np.ndarray:
    """Fitted best value H0'b_main + max_i H1'e_i per row, by enumeration."""
    return H0 @ beta_main + (H1 @ eff.T).max(axis=1)


def _effective(coding: np.ndarray, beta_int: np.ndarray, d: int) -> np.ndarray:
    coding = np.asarray(coding)
    if coding.shape[1] == 0:
        return np.zeros((coding.shape[0], d))
    return coding @ np.asarray(beta_int).reshape(coding.shape[1], d)


def _smooth_vector(B1: np.ndarray, y1: np.ndarray, present: np.ndarray,
                   H20: np.ndarray, H21: np.ndarray, beta2_hat_main: np.ndarray,
                   ref1: np.ndarray, ref2_main: np.ndarray,
                   eff_ref: np.ndarray) -> np.ndarray:
    """Per-unit bracket of the smooth average: the reference-model stage-1
    residual plus the next-stage main-effect correction."""
    z = (y1 - B1 @ ref1).copy()
    corr = _eval_terms_max(H20, H21, ref2_main, eff_ref) + H20 @ (beta2_hat_main - ref2_main)
    z[present] += corr
    return z


def _ref_optimal_mask(vals_ref: np.ndarray) -> np.ndarray:
    """Argmax membership of the reference effective values, with a relative
    tolerance so exactly-tied coefficients are all included."""
    vmax = vals_ref.max(axis=1, keepdims=True)
    tol = 1e-12 * np.maximum(1.0, np.abs(vmax))
    return vals_ref >= vmax - tol


def _unit_stats(H21: np.ndarray, vals_hat: np.ndarray, stacked_cov: np.ndarray,
                stats_n: int) -> np.ndarray:
    """Vectorized per-unit comparison statistics, (n2, K).

    stats[u, i] compares treatment i against its best competitor at unit u's
    features, scaled by stats_n over the pairwise variance. 0/0 is 0 and a
    positive gap over a degenerate variance is +inf. Tiny negative variances
    from rounding are clipped; genuinely negative ones raise.
    """
    n2, K = vals_hat.shape
    d = H21.shape[1]
    if K == 1:
        return np.zeros((n2, 1))
    rows = np.arange(n2)
    arg1 = np.argmax(vals_hat, axis=1)
    m1 = vals_hat[rows, arg1]
    masked = vals_hat.copy()
    masked[rows, arg1] = -np.inf
    arg2 = np.argmax(masked, axis=1)
    m2 = masked[rows, arg2]
    cols = np.arange(K)[None, :]
    is_best = cols == arg1[:, None]
    best_other = np.where(is_best, m2[:, None], m1[:, None])
    khat = np.where(is_best, arg2[:, None], arg1[:, None])
    zeta = zeta_from_stacked(stacked_cov, d)
    Z = np.zeros((K, K, d, d))
    for i in range(K):
        for j in range(K):
            if i != j:
                Z[i, j] = zeta(i, j)
    qf = np.einsum("ud,ijdh,uh->uij", H21, Z, H21)
    den = qf[rows[:, None], cols, khat]
    scale = float(np.max(np.abs(den))) if den.size else 0.0
    if np.any(den < -1e-10 * max(scale, 1.0)):
        raise ValueError("pretest denominator is negative; covariance not PSD")
    den = np.maximum(den, 0.0)
    num = stats_n * (vals_hat - best_other) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0),
                        np.where(num == 0.0, 0.0, np.inf))


def _branches(stats: np.ndarray, vals_hat: np.ndarray, aref: np.ndarray,
              lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Acceptance partition at threshold lam.

    Returns the per-unit near-best membership mask (statistics at or below
    lam when any is, else the fitted argmax alone), the accepted flag (more
    than one member), and the kernel mask (union with the reference-optimal
    set)."""
    any_low = stats.min(axis=1) <= lam
    amask = np.where(any_low[:, None], stats <= lam, False)
    rest = np.flatnonzero(~any_low)
    if rest.size:
        amask[rest, np.argmax(vals_hat[rest], axis=1)] = True
    accept = amask.sum(axis=1) > 1
    return amask, accept, amask | aref


@dataclass(frozen=True, eq=False)
class TwoStagePrep:
    """Threshold-independent work for one (sample, contrast, center) triple."""

    n_scale: float
    smooth: float           # c'W, the smooth average
    a2: np.ndarray          # (n2,) per-unit contrast weights c' Sigma1^-1 B1_u / n1
    H21: np.ndarray         # (n2, d)
    vals_hat: np.ndarray    # (n2, K) fitted effective values
    stats: np.ndarray       # (n2, K) per-unit pretest statistics
    aref: np.ndarray        # (n2, K) reference-optimal membership
    U_vals: np.ndarray      # (n2,) scaled plug-in max errors
    T1: np.ndarray          # (n2, K) H21 V_eff' for the kernel
    coding: np.ndarray      # (K, m)
    center_int: np.ndarray  # (m*d,) scaled reference interaction block
    halfwidth: np.ndarray   # (m*d,) candidate box half-widths


def prep_two_stage(c: np.ndarray, *, B1: np.ndarray, y1: np.ndarray, fit1,
                   present: np.ndarray, H20: np.ndarray, H21: np.ndarray,
                   fit2, n_main2: int, coding2: np.ndarray,
                   ref1: np.ndarray, ref2: np.ndarray,
                   box_multiplier: float) -> TwoStagePrep:
    """Assemble the threshold-independent pieces of the two-stage bounds.

    fit1/fit2 are the passed sample's own stage fits (plug-ins, pretests,
    and the candidate box come from them); ref1/ref2 are the reference
    coefficients the bounds are centered on. present flags stage-1 rows
    carrying a stage-2 record; H20/H21 are stage-2 features on those rows.
    """
    c = np.asarray(c, dtype=float)
    if len(ref1) != len(fit1.beta) or len(ref2) != len(fit2.beta):
        raise ValueError("reference coefficient lengths do not match the fits")
    n_scale = float(fit1.n)
    sqrt_n = np.sqrt(n_scale)
    coding2 = np.asarray(coding2, dtype=float)
    ref2_main, ref2_int = ref2[:n_main2], ref2[n_main2:]
    d = H21.shape[1]
    eff_ref = _effective(coding2, ref2_int, d)
    eff_hat = _effective(coding2, fit2.beta[n_main2:], d)

    z = _smooth_vector(B1, y1, present, H20, H21, fit2.beta[:n_main2],
                       ref1, ref2_main, eff_ref)
    a = (B1 @ (fit1.gram_inv @ c)) / n_scale
    smooth = sqrt_n * float(a @ z)

    vals_hat = H21 @ eff_hat.T
    vals_ref = H21 @ eff_ref.T
    cov_int = fit2.cov_beta_scaled[n_main2:, n_main2:]
    stacked = stacked_effective_cov(cov_int, coding2)

    return TwoStagePrep(
        n_scale=n_scale,
        smooth=smooth,
        a2=a[present],
        H21=H21,
        vals_hat=vals_hat,
        stats=_unit_stats(H21, vals_hat, stacked, fit2.n),
        aref=_ref_optimal_mask(vals_ref),
        U_vals=sqrt_n * (vals_hat.max(axis=1) - vals_ref.max(axis=1)),
        T1=sqrt_n * (vals_hat - vals_ref),
        coding=coding2,
        center_int=sqrt_n * ref2_int,
        halfwidth=box_multiplier * np.sqrt(np.clip(np.diag(cov_int), 0.0, None)),
    )


def draw_candidates(center: np.ndarray, halfwidth: np.ndarray, search: GammaSearch,
                    extra: np.ndarray | None = None) -> np.ndarray:
    """Uniform box draws around the scaled center; the exact center is
    prepended when include_center is set, extra rows are appended verbatim."""
    rng = np.random.default_rng(search.rng_seed)
    center = np.asarray(center, dtype=float)
    draws = center + rng.uniform(-1.0, 1.0, size=(search.n_gamma, len(center))) * halfwidth
    parts = []
    if search.include_center:
        parts.append(center[None, :])
    parts.append(draws)
    if extra is not None:
        parts.append(np.atleast_2d(np.asarray(extra, dtype=float)))
    return np.vstack(parts)


def eval_two_stage(prep: TwoStagePrep, candidates: np.ndarray, lam: float) -> BoundsResult:
    """Evaluate the two-stage bounds at one threshold over a candidate set."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise ValueError("candidate set is empty")
    amask, accept, union = _branches(prep.stats, prep.vals_hat, prep.aref, lam)
    plug = float(np.sum(prep.a2 * ~accept * prep.U_vals))
    w = prep.a2 * accept
    G = candidates.shape[0]
    m = prep.coding.shape[1]
    d = prep.H21.shape[1]
    gam_eff = np.einsum("km,gmd->gkd", prep.coding, candidates.reshape(G, m, d))
    P = np.einsum("ud,gkd->guk", prep.H21, gam_eff)
    msk = union[None, :, :]
    shifted = np.where(msk, prep.T1[None, :, :] + P, -np.inf).max(axis=2)
    base = np.where(msk, P, -np.inf).max(axis=2)
    S = (shifted - base) @ w
    i_up = int(np.argmax(S))
    i_lo = int(np.argmin(S))
    total = prep.smooth + plug
    return BoundsResult(
        upper=total + float(S[i_up]),
        lower=total + float(S[i_lo]),
        gamma_at_sup=candidates[i_up].copy(),
        gamma_at_inf=candidates[i_lo].copy(),
        accept_fraction=float(accept.mean()) if accept.size else 0.0,
        smooth_part=prep.smooth,
        plug_part=plug,
    )


def _two_stage_inputs(ds: Dataset, fit: QFit):
    st1, st2 = fit.stages[0], fit.stages[1]
    B1, y1 = design_rows(ds, 1, st1.rows)
    pos = {int(r): k for k, r in enumerate(st1.rows)}
    present = np.zeros(len(st1.rows), dtype=bool)
    present[[pos[int(r)] for r in st2.rows]] = True
    H20 = feature_matrix(ds, st2.design.main, st2.rows)
    H21 = feature_matrix(ds, st2.design.interact, st2.rows)
    return st1, st2, B1, y1, present, H20, H21


def smooth_term(ds: Dataset, ref: Sequence[np.ndarray], c: np.ndarray,
                fit: QFit | None = None) -> float:
    """The smooth average part c'W of the decomposition, centered at the
    reference coefficients ref = (stage-1, stage-2). With ref equal to the
    sample's own fitted coefficients this is zero by the normal equations."""
    from .qlearn import fit_qlearning
    if fit is None:
        fit = fit_qlearning(ds)
    st1, st2, B1, y1, present, H20, H21 = _two_stage_inputs(ds, fit)
    ref1, ref2 = (np.asarray(r, dtype=float) for r in ref)
    if len(ref1) != len(st1.ols.beta) or len(ref2) != len(st2.ols.beta):
        raise ValueError("reference coefficient lengths do not match the fits")
    eff_ref = _effective(st2.design.coding, ref2[st2.n_main:], H21.shape[1])
    z = _smooth_vector(B1, y1, present, H20, H21, st2.beta_main, ref1,
                       ref2[:st2.n_main], eff_ref)
    c = np.asarray(c, dtype=float)
    n1 = st1.ols.n
    return float(np.sqrt(n1) * (st1.ols.gram_inv @ c) @ (B1.T @ z) / n1)


def bounds_two_stage(ds: Dataset, fit: QFit, center: Sequence[np.ndarray],
                     lam: float, c: np.ndarray, search: GammaSearch,
                     extra_candidates: np.ndarray | None = None) -> BoundsResult:
    """Upper and lower bounds for a two-stage problem.

    center = (stage-1, stage-2) reference coefficient vectors; pass the
    original sample's estimates when ds is a bootstrap resample. All
    plug-ins, pretests, and the candidate box come from the passed fit.
    extra_candidates rows (scaled base interaction space) are appended to
    the drawn set.
    """
    if fit.n_stages != 2:
        raise ValueError("bounds_two_stage needs a two-stage fit")
    st1, st2, B1, y1, present, H20, H21 = _two_stage_inputs(ds, fit)
    ref1, ref2 = (np.asarray(r, dtype=float) for r in center)
    prep = prep_two_stage(
        c, B1=B1, y1=y1, fit1=st1.ols, present=present, H20=H20, H21=H21,
        fit2=st2.ols, n_main2=st2.n_main, coding2=st2.design.coding,
        ref1=ref1, ref2=ref2, box_multiplier=search.box_halfwidth_multiplier)
    cands = draw_candidates(prep.center_int, prep.halfwidth, search,
                            extra=extra_candidates)
    return eval_two_stage(prep, cands, lam)


def bounds_general(ds: Dataset, fit: QFit, center: Sequence[np.ndarray],
                   lam: float, c: np.ndarray, t: int, search: GammaSearch,
                   extra_candidates: np.ndarray | None = None) -> BoundsResult:
    """Bounds on c' sqrt(n) (beta_hat_t - beta_ref_t) for up to three stages.

    center holds one reference coefficient vector per stage. Candidates are
    joint shifts, one scaled base-interaction block per stage after t,
    drawn in a single search and stacked. The bound process is evaluated
    bottom-up: the terminal stage contributes its constant deviation, and
    each earlier stage combines per-unit plug-ins on pretest-rejected units
    with kernel terms on accepted units, propagating the full coefficient
    process per candidate. With two stages this reduces to bounds_two_stage.
    """
    T = fit.n_stages
    if not 1 <= t < T:
        raise ValueError("target stage must precede the terminal stage")
    if T > 3:
        raise ValueError("at most three stages are supported")
    if len(center) != T:
        raise ValueError("need one reference coefficient vector per stage")
    c = np.asarray(c, dtype=float)
    refs = [np.asarray(r, dtype=float) for r in center]
    for s in range(t, T + 1):
        if len(refs[s - 1]) != len(fit.stages[s - 1].ols.beta):
            raise ValueError("reference coefficient lengths do not match the fits")
    n_scale = float(fit.stages[t - 1].ols.n)
    sqrt_n = np.sqrt(n_scale)

    # joint candidate box: one scaled interaction block per stage after t
    rng = np.random.default_rng(search.rng_seed)
    blocks = []
    centers = []
    for s in range(t + 1, T + 1):
        st = fit.stages[s - 1]
        cov_int = st.ols.cov_beta_scaled[st.n_main:, st.n_main:]
        ctr = sqrt_n * refs[s - 1][st.n_main:]
        half = search.box_halfwidth_multiplier * np.sqrt(np.clip(np.diag(cov_int), 0.0, None))
        blocks.append(ctr + rng.uniform(-1.0, 1.0, size=(search.n_gamma, len(ctr))) * half)
        centers.append(ctr)
    cands = np.hstack(blocks)
    if search.include_center:
        cands = np.vstack([np.concatenate(centers), cands])
    if extra_candidates is not None:
        cands = np.vstack([cands, np.atleast_2d(np.asarray(extra_candidates, dtype=float))])
    G = cands.shape[0]
    offs = []
    pos = 0
    for s in range(t + 1, T + 1):
        width = len(fit.stages[s - 1].ols.beta) - fit.stages[s - 1].n_main
        offs.append((pos, pos + width))
        pos += width

    stT = fit.stages[T - 1]
    proc = np.tile(sqrt_n * (stT.ols.beta - refs[T - 1]), (G, 1))
    accept_last = np.zeros(0, dtype=bool)
    smooth_c = 0.0
    plug_c = 0.0
    for s in range(T - 1, t - 1, -1):
        st = fit.stages[s - 1]
        nxt = fit.stages[s]
        B_s, y_s = design_rows(ds, s, st.rows)
        H0n = feature_matrix(ds, nxt.design.main, nxt.rows)
        H1n = feature_matrix(ds, nxt.design.interact, nxt.rows)
        n_s = float(st.ols.n)

        ref_s, ref_n = refs[s - 1], refs[s]
        eff_ref = _effective(nxt.design.coding, ref_n[nxt.n_main:], H1n.shape[1])
        eff_hat = nxt.effective_coefficients()
        vals_hat = H1n @ eff_hat.T
        vals_ref = H1n @ eff_ref.T
        U_vals = sqrt_n * (vals_hat.max(axis=1) - vals_ref.max(axis=1))
        V_eff = sqrt_n * (eff_hat - eff_ref)
        cov_int = nxt.ols.cov_beta_scaled[nxt.n_main:, nxt.n_main:]
        stacked = stacked_effective_cov(cov_int, nxt.design.coding)
        stats = _unit_stats(H1n, vals_hat, stacked, nxt.ols.n)
        amask, accept, union = _branches(stats, vals_hat, _ref_optimal_mask(vals_ref), lam)
        accept_last = accept

        z = y_s - B_s @ ref_s
        mu_ref = _eval_terms_max(H0n, H1n, ref_n[: nxt.n_main], eff_ref)
        pos_map = {int(r): k for k, r in enumerate(st.rows)}
        idx_in_s = np.array([pos_map[int(r)] for r in nxt.rows], dtype=int)
        z[idx_in_s] += mu_ref
        Wp = st.ols.gram_inv @ (B_s.T @ z) * (sqrt_n / n_s)

        m_n = np.asarray(nxt.design.coding).shape[1]
        d_n = H1n.shape[1]
        coding_n = np.asarray(nxt.design.coding, dtype=float)
        proc_eff = np.einsum("km,gmd->gkd", coding_n,
                             proc[:, nxt.n_main:].reshape(G, m_n, d_n))
        lo, hi = offs[s - t]
        gam_eff = np.einsum("km,gmd->gkd", coding_n,
                            cands[:, lo:hi].reshape(G, m_n, d_n))

        # every unit with a next-stage record carries the propagated
        # main-block term; branch-specific pieces are added on top
        brackets = np.zeros((G, len(st.rows)))
        brackets[:, idx_in_s] = np.einsum("um,gm->gu", H0n, proc[:, : nxt.n_main])

        sing = np.flatnonzero(~accept)
        sing_part = None
        if sing.size:
            i_hat = np.argmax(amask[sing], axis=1)
            HV_proc = np.einsum("ud,gud->gu", H1n[sing], proc_eff[:, i_hat, :])
            hv_now = np.einsum("ud,ud->u", H1n[sing], V_eff[i_hat])
            sing_part = U_vals[sing][None, :] + HV_proc - hv_now[None, :]
            brackets[:, idx_in_s[sing]] += sing_part
        acc = np.flatnonzero(accept)
        if acc.size:
            msk = union[acc][None, :, :]
            T1a = np.einsum("ud,gkd->guk", H1n[acc], proc_eff)
            Pa = np.einsum("ud,gkd->guk", H1n[acc], gam_eff)
            shifted = np.where(msk, T1a + Pa, -np.inf).max(axis=2)
            basev = np.where(msk, Pa, -np.inf).max(axis=2)
            brackets[:, idx_in_s[acc]] += shifted - basev

        proc = Wp[None, :] + (np.einsum("up,gu->gp", B_s, brackets) / n_s) @ st.ols.gram_inv.T
        if s == t:
            smooth_c = float(c @ Wp)
            if sing.size:
                pv = np.zeros(len(st.rows))
                pv[idx_in_s[sing]] = sing_part[0]
                plug_c = float(c @ (st.ols.gram_inv @ (B_s.T @ pv)) / n_s)

    vals = proc @ c
    i_up = int(np.argmax(vals))
    i_lo = int(np.argmin(vals))
    return BoundsResult(
        upper=float(vals[i_up]),
        lower=float(vals[i_lo]),
        gamma_at_sup=cands[i_up].copy(),
        gamma_at_inf=cands[i_lo].copy(),
        accept_fraction=float(accept_last.mean()) if accept_last.size else 0.0,
        smooth_part=smooth_c,
        plug_part=plug_c,
    )
