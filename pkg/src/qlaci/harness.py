"""Monte Carlo coverage and width experiments over the built-in generative
models.

A cell of the experiment grid is one (model, method, target, threshold rule)
combination. Every Monte Carlo rep simulates a fresh dataset, fits the stage
regressions, and assembles one confidence interval per cell; the cell then
aggregates containment of the exact population parameter and the mean
interval width across reps. Exact parameters come from weighted least
squares over the enumerated joint distribution, run backward through the
same max-pseudo-outcome recursion the sample fit uses, so the truth side
carries no simulation error.

Interval methods share work within a rep: all of them consume the same
bootstrap replicate stream, each replicate is refit once, and with two
treatment codes the bound kernel is threshold-independent, so a threshold
sweep costs one kernel evaluation plus a weighted sum per threshold. The
assembled intervals are the ones the public per-method functions would
return for the same seeds. Seeds derive hierarchically from the master seed
through (model position, rep, replicate), which makes serial and threaded
execution agree exactly.
"""

from __future__ import annotations

import csv
import math
import os
import re
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import binom

from .bounds import GammaSearch, draw_candidates, eval_two_stage, prep_two_stage
from .comparators import ppe_interval, st_interval
from .dataio import Dataset, DesignSpec, design_rows, feature_matrix, present_mask
from .genmodels import GenModelSpec, model_spec, population, simulate, suite_design
from .linreg import OlsFit, SingularDesignError, fit_ols
from .pretest import LambdaRule, lambda_value, rule_text
from .qlearn import fit_qlearning
from .resample import (BootstrapPlan, RedrawLimitError, _attempt_seeds,
                       aci_interval, cpb_interval, quantile)

__all__ = [
    "CellReport",
    "ExperimentConfig",
    "ExperimentError",
    "ExperimentReport",
    "FailedRep",
    "RepRecord",
    "Target",
    "flag_significance",
    "parse_target",
    "run_experiment",
    "true_coefficients",
    "true_parameter",
    "write_rep_log_csv",
    "write_summary_csv",
]

_METHODS = ("aci", "cpb", "ppe", "st")
_FLAG_LEVEL = 0.05


class ExperimentError(RuntimeError):
    """An experiment cell could not be completed."""


# ---------------------------------------------------------------------------
# exact population parameters


def true_coefficients(spec: GenModelSpec) -> tuple[np.ndarray, ...]:
    """Population regression coefficients of every stage, by enumeration.

    Runs the backward recursion on the finite joint distribution: the final
    stage regresses the conditional mean reward (noise integrates out), and
    each earlier stage regresses the best fitted next-stage value, all under
    probability-weighted least squares. Returns one coefficient vector per
    stage, first stage first.
    """
    ds, probs = population(spec)
    rows = np.arange(ds.n)
    future = np.zeros(ds.n)
    betas: list[np.ndarray] = [np.empty(0)] * ds.spec.n_stages
    for t in range(ds.spec.n_stages, 0, -1):
        sd = ds.spec.stages[t - 1]
        B, y_raw = design_rows(ds, t, rows)
        y = y_raw + future
        W = probs[:, None] * B
        beta = np.linalg.solve(B.T @ W, W.T @ y)
        betas[t - 1] = beta
        if t > 1:
            H0 = feature_matrix(ds, sd.main, rows)
            H1 = feature_matrix(ds, sd.interact, rows)
            nm = len(sd.main)
            eff = sd.coding @ beta[nm:].reshape(sd.coding.shape[1], -1)
            future = H0 @ beta[:nm] + (H1 @ eff.T).max(axis=1)
    return tuple(betas)


def true_parameter(spec: GenModelSpec, t: int, c) -> float:
    """Exact population value of the linear combination c' beta_t."""
    betas = true_coefficients(spec)
    if not 1 <= t <= len(betas):
        raise ValueError(f"stage must lie in 1..{len(betas)}, got {t}")
    c = np.asarray(c, dtype=float)
    if c.shape != betas[t - 1].shape:
        raise ValueError(
            f"contrast length {c.shape} does not match stage {t} "
            f"coefficient length {betas[t - 1].shape}")
    return float(c @ betas[t - 1])


# ---------------------------------------------------------------------------
# experiment grid


@dataclass(frozen=True)
class Target:
    """Scalar estimand c' beta_t with a name used in reports and logs.

    true_value overrides the enumerated population value when set; leave it
    None for the built-in models.
    """

    stage: int
    contrast: tuple[float, ...]
    name: str
    true_value: float | None = None

    def __post_init__(self) -> None:
        if self.stage < 1:
            raise ValueError("target stage must be positive")
        vals = tuple(float(v) for v in self.contrast)
        if not vals:
            raise ValueError("target contrast is empty")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("target contrast must be finite")
        object.__setattr__(self, "contrast", vals)
        if not self.name:
            raise ValueError("target needs a name")


_TARGET_RE = re.compile(r"stage(\d+)\.(main|action)\.(\d+)\Z")


def parse_target(text: str, design: DesignSpec) -> Target:
    """Unit-contrast target spelled 'stage{t}.{main|action}.{j}'.

    j is 1-based inside the block: 'main' indexes the main-effect features
    and 'action' the flattened coding-column by interaction-feature block,
    so stage1.action.1 is the first treatment-interaction coefficient (the
    main effect of the stage-1 action under an intercept-led interaction
    list).
    """
    text = text.strip()
    m = _TARGET_RE.match(text)
    if m is None:
        raise ValueError(f"cannot parse target {text!r}; "
                         "expected stage<t>.<main|action>.<j>")
    t, block, j = int(m.group(1)), m.group(2), int(m.group(3))
    if not 1 <= t <= design.n_stages:
        raise ValueError(f"target stage {t} outside 1..{design.n_stages}")
    sd = design.stages[t - 1]
    d0 = len(sd.main)
    width = d0 if block == "main" else sd.n_params - d0
    if not 1 <= j <= width:
        raise ValueError(f"index {j} outside the {width}-wide {block} block")
    pos = j - 1 if block == "main" else d0 + j - 1
    contrast = tuple(1.0 if i == pos else 0.0 for i in range(sd.n_params))
    return Target(stage=t, contrast=contrast, name=text)


@dataclass(frozen=True)
class ExperimentConfig:
    """One coverage/width experiment: models, methods, targets, and sizes.

    plan.seed and search.rng_seed are superseded by seeds derived from the
    master seed per (model position, rep), so two configs differing only in
    those fields run identical experiments. threads caps the worker count
    without affecting any number in the report. Methods aci, ppe, and st
    accept first-stage targets only, and st additionally needs the two-stage
    binary suite; cpb handles any stage.
    """

    suite: str
    models: tuple[str, ...]
    methods: tuple[str, ...] = ("aci",)
    targets: tuple[Target, ...] = ()
    n: int = 150
    mc_reps: int = 200
    plan: BootstrapPlan = field(default_factory=lambda: BootstrapPlan(n_boot=500))
    lambda_rules: tuple[LambdaRule, ...] = (LambdaRule("loglog"),)
    alpha: float = 0.05
    seed: int = 0
    search: GammaSearch = field(default_factory=GammaSearch)
    st_denominator: str = "abs"
    failure_budget: float = 0.01
    out_dir: str | None = None
    threads: int = field(default=1, compare=False)

    def __post_init__(self) -> None:
        design = suite_design(self.suite)
        models = tuple(self.models)
        if not models:
            raise ValueError("need at least one model label")
        for label in models:
            model_spec(self.suite, label)
        object.__setattr__(self, "models", models)

        methods = tuple(m.lower() for m in self.methods)
        if not methods:
            raise ValueError("need at least one method")
        for m in methods:
            if m not in _METHODS:
                raise ValueError(f"unknown method {m!r}")
        if len(set(methods)) != len(methods):
            raise ValueError("duplicate methods")
        if "st" in methods and self.suite != "two_stage_binary":
            raise ValueError("method st needs the two_stage_binary suite")
        if ("ppe" in methods or "st" in methods) and design.n_stages != 2:
            raise ValueError("methods ppe and st are two-stage only")
        object.__setattr__(self, "methods", methods)

        targets = tuple(self.targets)
        if not targets:
            targets = (parse_target("stage1.action.1", design),)
        first_stage_only = set(methods) - {"cpb"}
        for tg in targets:
            if tg.stage > design.n_stages:
                raise ValueError(f"target {tg.name!r} stage {tg.stage} "
                                 f"exceeds the suite's {design.n_stages} stages")
            p = design.stages[tg.stage - 1].n_params
            if len(tg.contrast) != p:
                raise ValueError(f"target {tg.name!r} contrast length "
                                 f"{len(tg.contrast)} does not match {p}")
            if tg.stage != 1 and first_stage_only:
                raise ValueError(
                    f"target {tg.name!r} is not first-stage; methods "
                    f"{sorted(first_stage_only)} support first-stage targets only")
        if len({tg.name for tg in targets}) != len(targets):
            raise ValueError("duplicate target names")
        object.__setattr__(self, "targets", targets)

        rules = tuple(self.lambda_rules)
        if ("aci" in methods or "ppe" in methods):
            if not rules:
                raise ValueError("methods aci and ppe need a lambda rule")
            if len({rule_text(r) for r in rules}) != len(rules):
                raise ValueError("duplicate lambda rules")
        object.__setattr__(self, "lambda_rules", rules)

        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.mc_reps < 1:
            raise ValueError("mc_reps must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.st_denominator not in ("abs", "squared"):
            raise ValueError("st_denominator must be 'abs' or 'squared'")
        if not 0.0 <= self.failure_budget <= 1.0:
            raise ValueError("failure_budget must lie in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def cell_keys(self) -> tuple[tuple[str, str, str], ...]:
        """(method, target name, rule text) triples in reporting order;
        methods without a threshold carry an empty rule text."""
        keys = []
        for method in self.methods:
            for tg in self.targets:
                if method in ("aci", "ppe"):
                    keys.extend((method, tg.name, rule_text(r))
                                for r in self.lambda_rules)
                else:
                    keys.append((method, tg.name, ""))
        return tuple(keys)


@dataclass(frozen=True)
class CellReport:
    model: str
    method: str
    target: str
    lambda_rule: str        # "" for methods without a threshold
    coverage: float
    mean_width: float
    mc_se: float
    flagged: bool
    n_reps: int             # successful reps the estimates average over
    n_failed: int
    wall_time: float = field(compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")
        if self.mean_width < 0.0:
            raise ValueError("mean width cannot be negative")


@dataclass(frozen=True)
class RepRecord:
    """One interval of one rep, enough to recompute any cell estimate."""

    model: str
    rep: int
    seed: int               # replicate-stream seed of this rep's bootstrap
    method: str
    target: str
    lambda_rule: str
    lo: float
    hi: float
    contained: bool


@dataclass(frozen=True)
class FailedRep:
    model: str
    rep: int
    reason: str


@dataclass(frozen=True)
class ExperimentReport:
    config: ExperimentConfig
    cells: tuple[CellReport, ...]
    rep_log: tuple[RepRecord, ...]
    failures: tuple[FailedRep, ...]

    def select(self, **where) -> tuple[CellReport, ...]:
        """Cells whose fields equal every keyword given, reporting order."""
        return tuple(c for c in self.cells
                     if all(getattr(c, k) == v for k, v in where.items()))


def flag_significance(coverage: float, reps: int, nominal: float) -> bool:
    """Exact one-sided binomial check that coverage sits below nominal.

    Treats coverage as a count of reps successes and flags when the lower
    tail probability under the nominal rate falls below 0.05. Coverage
    exactly at nominal is never flagged.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("coverage must lie in [0, 1]")
    if not 0.0 < nominal < 1.0:
        raise ValueError("nominal must lie in (0, 1)")
    successes = int(round(coverage * reps))
    return float(binom.cdf(successes, reps, nominal)) < _FLAG_LEVEL


# ---------------------------------------------------------------------------
# per-rep evaluation


def _rep_seeds(master: int, mi: int, rep: int):
    ds_seed = np.random.SeedSequence((master, mi, rep, 0))
    boot = int(np.random.SeedSequence((master, mi, rep, 1)).generate_state(1)[0])
    return ds_seed, boot


@dataclass(frozen=True, eq=False)
class _RepDone:
    rep: int
    seed: int
    values: dict            # (method, target name, rule text) -> (lo, hi)


@dataclass(frozen=True, eq=False)
class _Panel:
    """Numeric arrays of one simulated two-stage dataset; resampling is row
    indexing, so replicates never touch trajectory objects."""

    n: int
    B1: np.ndarray
    y1: np.ndarray          # raw first-stage rewards
    B2: np.ndarray
    y2: np.ndarray
    H20: np.ndarray
    H21: np.ndarray
    coding: np.ndarray
    n_main2: int


def _build_panel(ds: Dataset) -> _Panel | None:
    if ds.spec.n_stages != 2:
        return None
    if not (np.all(present_mask(ds, 1)) and np.all(present_mask(ds, 2))):
        return None
    rows = np.arange(ds.n)
    sd2 = ds.spec.stages[1]
    B1, y1 = design_rows(ds, 1, rows)
    B2, y2 = design_rows(ds, 2, rows)
    return _Panel(n=ds.n, B1=B1, y1=y1, B2=B2, y2=y2,
                  H20=feature_matrix(ds, sd2.main, rows),
                  H21=feature_matrix(ds, sd2.interact, rows),
                  coding=np.asarray(sd2.coding),
                  n_main2=len(sd2.main))


def _panel_fit(p: _Panel, idx: np.ndarray | None):
    """Both stage fits on the full panel or a resample of its rows,
    mirroring the stage recursion operation for operation."""
    if idx is None:
        B1, y1, B2, y2, H20, H21 = p.B1, p.y1, p.B2, p.y2, p.H20, p.H21
    else:
        B1, y1, B2, y2 = p.B1[idx], p.y1[idx], p.B2[idx], p.y2[idx]
        H20, H21 = p.H20[idx], p.H21[idx]
    f2 = fit_ols(B2, y2)
    eff = p.coding @ f2.beta[p.n_main2:].reshape(p.coding.shape[1], -1)
    future = H20 @ f2.beta[:p.n_main2] + (H21 @ eff.T).max(axis=1)
    f1 = fit_ols(B1, y1 + future)
    return f1, f2, B1, y1, H20, H21


def _st_value(p: _Panel, f2: OlsFit, f1_design: np.ndarray, y1: np.ndarray,
              H20: np.ndarray, H21: np.ndarray, c: np.ndarray,
              denominator: str) -> float:
    nm = p.n_main2
    a = H21 @ f2.beta[nm:]
    cov_int = f2.cov_beta_scaled[nm:, nm:]
    q = 3.0 * np.einsum("ud,dh,uh->u", H21, cov_int, H21) / f2.n
    if denominator == "abs":
        term = np.maximum(np.abs(a) - q, 0.0)
    else:
        with np.errstate(divide="ignore"):
            factor = np.where(a != 0.0,
                              np.maximum(1.0 - q / np.where(a != 0.0, a, 1.0) ** 2, 0.0),
                              0.0)
        term = np.abs(a) * factor
    ytil = y1 + (H20 @ f2.beta[:nm] + term)
    return float(c @ fit_ols(f1_design, ytil).beta)


def _two_stage_rep(cfg: ExperimentConfig, panel: _Panel, boot_seed: int) -> dict:
    """Fused per-rep engine: one replicate stream feeds every method and
    threshold rule. With two treatment codes the replicate kernel is shared
    across thresholds; with more, each threshold re-evaluates the bounds on
    the shared preparation."""
    methods = cfg.methods
    need_aci = "aci" in methods
    need_ppe = "ppe" in methods
    need_bounds = need_aci or need_ppe
    need_st = "st" in methods
    n = panel.n
    sqrt_n = math.sqrt(n)
    K = panel.coding.shape[0]
    present_all = np.ones(n, dtype=bool)
    lams = [lambda_value(r, n) for r in cfg.lambda_rules]
    rtexts = [rule_text(r) for r in cfg.lambda_rules]

    f1, f2, *_ = _panel_fit(panel, None)
    contrasts = [np.asarray(tg.contrast, dtype=float) for tg in cfg.targets]
    stage_fit = {1: f1, 2: f2}
    points = [float(c @ stage_fit[tg.stage].beta)
              for tg, c in zip(cfg.targets, contrasts)]
    bound_ts = [ti for ti, tg in enumerate(cfg.targets) if tg.stage == 1]
    st_points = {}
    if need_st:
        for ti in bound_ts:
            st_points[ti] = _st_value(panel, f2, panel.B1, panel.y1,
                                      panel.H20, panel.H21, contrasts[ti],
                                      cfg.st_denominator)

    nt, nl = len(cfg.targets), len(lams)
    uppers = [[[] for _ in range(nl)] for _ in range(nt)]
    lowers = [[[] for _ in range(nl)] for _ in range(nt)]
    ppe_vals = [[[] for _ in range(nl)] for _ in range(nt)]
    cpb_diffs = [[] for _ in range(nt)]
    st_diffs = [[] for _ in range(nt)]

    for b in range(cfg.plan.n_boot):
        for attempt in range(cfg.plan.max_redraws + 1):
            rng, gamma_seed = _attempt_seeds(boot_seed, b, attempt)
            idx = rng.integers(0, n, size=n)
            try:
                f1b, f2b, B1b, y1b, H20b, H21b = _panel_fit(panel, idx)
                out_cpb = [float(c @ (f1b if tg.stage == 1 else f2b).beta) - pt
                           for tg, c, pt in zip(cfg.targets, contrasts, points)]
                out_st = {}
                if need_st:
                    for ti in bound_ts:
                        out_st[ti] = _st_value(panel, f2b, B1b, y1b, H20b, H21b,
                                               contrasts[ti], cfg.st_denominator
                                               ) - st_points[ti]
                out_bounds = {}
                if need_bounds and bound_ts:
                    preps = {ti: prep_two_stage(
                        contrasts[ti], B1=B1b, y1=y1b, fit1=f1b,
                        present=present_all, H20=H20b, H21=H21b, fit2=f2b,
                        n_main2=panel.n_main2, coding2=panel.coding,
                        ref1=f1.beta, ref2=f2.beta,
                        box_multiplier=cfg.search.box_halfwidth_multiplier)
                        for ti in bound_ts}
                    prep0 = preps[bound_ts[0]]
                    md = len(prep0.center_int)
                    if need_aci:
                        search_b = replace(cfg.search, rng_seed=gamma_seed)
                        cands = draw_candidates(prep0.center_int,
                                                prep0.halfwidth, search_b)
                        n_box = cands.shape[0]
                    else:
                        cands = np.zeros((0, md))
                        n_box = 0
                    if K == 2:
                        rows = [cands] + ([np.zeros((1, md))] if need_ppe else [])
                        call = np.vstack(rows)
                        G = call.shape[0]
                        m, d = prep0.coding.shape[1], prep0.H21.shape[1]
                        gam_eff = np.einsum("km,gmd->gkd", prep0.coding,
                                            call.reshape(G, m, d))
                        P = np.einsum("ud,gkd->guk", prep0.H21, gam_eff)
                        # the kernel ignores the pretest partition: accepted
                        # units always keep both codes, rejected units get
                        # weight zero below. Slicing before the products
                        # keeps the matmul shapes, and so the exact floats,
                        # of the one-threshold evaluation.
                        kern = (prep0.T1[None, :, :] + P).max(axis=2) - P.max(axis=2)
                        kb, kz = kern[:n_box], kern[n_box:]
                        for li, lam in enumerate(lams):
                            accept = (prep0.stats <= lam).sum(axis=1) > 1
                            for ti in bound_ts:
                                pr = preps[ti]
                                plug = float(np.sum(pr.a2 * ~accept * pr.U_vals))
                                total = pr.smooth + plug
                                w = pr.a2 * accept
                                if need_aci:
                                    S = kb @ w
                                    out_bounds[(ti, li, "u")] = total + float(np.max(S))
                                    out_bounds[(ti, li, "l")] = total + float(np.min(S))
                                if need_ppe:
                                    out_bounds[(ti, li, "p")] = total + float((kz @ w)[0])
                    else:
                        zero = np.zeros((1, md))
                        for li, lam in enumerate(lams):
                            for ti in bound_ts:
                                if need_aci:
                                    res = eval_two_stage(preps[ti], cands, lam)
                                    out_bounds[(ti, li, "u")] = res.upper
                                    out_bounds[(ti, li, "l")] = res.lower
                                if need_ppe:
                                    out_bounds[(ti, li, "p")] = eval_two_stage(
                                        preps[ti], zero, lam).upper
            except SingularDesignError:
                continue
            break
        else:
            raise RedrawLimitError(
                f"replicate {b} stayed singular after {cfg.plan.max_redraws} redraws")
        for ti in range(nt):
            cpb_diffs[ti].append(out_cpb[ti])
        for ti, v in out_st.items():
            st_diffs[ti].append(v)
        for (ti, li, kind), v in out_bounds.items():
            {"u": uppers, "l": lowers, "p": ppe_vals}[kind][ti][li].append(v)

    values = {}
    a = cfg.alpha
    for method in methods:
        for ti, tg in enumerate(cfg.targets):
            pt = points[ti]
            if method == "aci":
                for li, rt in enumerate(rtexts):
                    u_hat = quantile(uppers[ti][li], 1.0 - a / 2.0)
                    l_hat = quantile(lowers[ti][li], a / 2.0)
                    values[("aci", tg.name, rt)] = (pt - u_hat / sqrt_n,
                                                    pt - l_hat / sqrt_n)
            elif method == "ppe":
                for li, rt in enumerate(rtexts):
                    vals = ppe_vals[ti][li]
                    values[("ppe", tg.name, rt)] = (
                        pt - quantile(vals, 1.0 - a / 2.0) / sqrt_n,
                        pt - quantile(vals, a / 2.0) / sqrt_n)
            elif method == "cpb":
                diffs = cpb_diffs[ti]
                values[("cpb", tg.name, "")] = (pt - quantile(diffs, 1.0 - a / 2.0),
                                                pt - quantile(diffs, a / 2.0))
            else:
                diffs = st_diffs[ti]
                values[("st", tg.name, "")] = (
                    st_points[ti] - quantile(diffs, 1.0 - a / 2.0),
                    st_points[ti] - quantile(diffs, a / 2.0))
    return values


def _general_rep(cfg: ExperimentConfig, ds: Dataset, boot_seed: int) -> dict:
    """Per-rep evaluation through the public interval functions, one
    bootstrap pass per method and rule. Serves designs the fused panel does
    not cover (three stages, incomplete trajectories)."""
    fit = fit_qlearning(ds)
    plan = replace(cfg.plan, seed=boot_seed)
    values = {}
    for method in cfg.methods:
        for tg in cfg.targets:
            c = np.asarray(tg.contrast, dtype=float)
            if method == "aci":
                for rule in cfg.lambda_rules:
                    iv = aci_interval(ds, fit, c, rule, cfg.search, plan, cfg.alpha)
                    values[("aci", tg.name, rule_text(rule))] = (iv.lo, iv.hi)
            elif method == "ppe":
                for rule in cfg.lambda_rules:
                    iv = ppe_interval(ds, fit, c, rule, plan, cfg.alpha)
                    values[("ppe", tg.name, rule_text(rule))] = (iv.lo, iv.hi)
            elif method == "cpb":
                stage = tg.stage

                def stat(d: Dataset, _s=stage, _c=c) -> float:
                    return float(_c @ fit_qlearning(d).stages[_s - 1].ols.beta)

                iv = cpb_interval(ds, stat, plan, cfg.alpha)
                values[("cpb", tg.name, "")] = (iv.lo, iv.hi)
            else:
                iv = st_interval(ds, c, plan, cfg.alpha, cfg.st_denominator)
                values[("st", tg.name, "")] = (iv.lo, iv.hi)
    return values


def _one_rep(cfg: ExperimentConfig, spec: GenModelSpec, mi: int, rep: int):
    ds_seed, boot_seed = _rep_seeds(cfg.seed, mi, rep)
    try:
        ds = simulate(spec, cfg.n, ds_seed)
        panel = _build_panel(ds)
        if panel is not None:
            values = _two_stage_rep(cfg, panel, boot_seed)
        else:
            values = _general_rep(cfg, ds, boot_seed)
    except (SingularDesignError, RedrawLimitError) as e:
        return FailedRep(spec.label, rep, str(e))
    return _RepDone(rep=rep, seed=boot_seed, values=values)


# ---------------------------------------------------------------------------
# the experiment driver


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run the full grid and aggregate per-cell coverage and width.

    Reps failing outright (singular original fit, or a bootstrap replicate
    past its redraw cap) are dropped with a warning and drop out of every
    cell of their model; more of them than failure_budget allows raises
    ExperimentError. With out_dir set, writes summary.csv and
    replications.csv there.
    """
    specs = [model_spec(cfg.suite, label) for label in cfg.models]
    truths: dict[tuple[str, str], float] = {}
    for spec in specs:
        betas = true_coefficients(spec)
        for tg in cfg.targets:
            truths[(spec.label, tg.name)] = (
                tg.true_value if tg.true_value is not None
                else float(np.asarray(tg.contrast) @ betas[tg.stage - 1]))

    keys = cfg.cell_keys()
    target_of = {tg.name: tg for tg in cfg.targets}
    cells: list[CellReport] = []
    rep_rows: list[RepRecord] = []
    failures: list[FailedRep] = []
    for mi, spec in enumerate(specs):
        t0 = time.perf_counter()
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                outs = list(pool.map(lambda r: _one_rep(cfg, spec, mi, r),
                                     range(cfg.mc_reps)))
        else:
            outs = [_one_rep(cfg, spec, mi, r) for r in range(cfg.mc_reps)]
        elapsed = time.perf_counter() - t0

        bad = [o for o in outs if isinstance(o, FailedRep)]
        for f in bad:
            warnings.warn(f"model {f.model}: rep {f.rep} dropped ({f.reason})",
                          stacklevel=2)
        failures.extend(bad)
        if len(bad) > cfg.failure_budget * cfg.mc_reps:
            raise ExperimentError(
                f"model {spec.label}: {len(bad)} of {cfg.mc_reps} reps failed, "
                f"over the budget of {cfg.failure_budget:g}")
        done = [o for o in outs if isinstance(o, _RepDone)]
        if not done:
            raise ExperimentError(f"model {spec.label}: no successful reps")

        per_cell: dict[tuple[str, str, str], list[tuple[float, float, bool]]] = {
            k: [] for k in keys}
        for o in done:
            for key in keys:
                lo, hi = o.values[key]
                truth = truths[(spec.label, target_of[key[1]].name)]
                contained = bool(lo <= truth <= hi)
                per_cell[key].append((lo, hi, contained))
                rep_rows.append(RepRecord(
                    model=spec.label, rep=o.rep, seed=o.seed, method=key[0],
                    target=key[1], lambda_rule=key[2], lo=lo, hi=hi,
                    contained=contained))
        for key in keys:
            triples = per_cell[key]
            reps = len(triples)
            cov = sum(1 for *_, inside in triples if inside) / reps
            width = sum(hi - lo for lo, hi, _ in triples) / reps
            cells.append(CellReport(
                model=spec.label, method=key[0], target=key[1],
                lambda_rule=key[2], coverage=cov, mean_width=width,
                mc_se=math.sqrt(cov * (1.0 - cov) / reps),
                flagged=flag_significance(cov, reps, 1.0 - cfg.alpha),
                n_reps=reps, n_failed=len(bad), wall_time=elapsed))

    report = ExperimentReport(config=cfg, cells=tuple(cells),
                              rep_log=tuple(rep_rows), failures=tuple(failures))
    if cfg.out_dir is not None:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_summary_csv(report, os.path.join(cfg.out_dir, "summary.csv"))
        write_rep_log_csv(report, os.path.join(cfg.out_dir, "replications.csv"))
    return report


# ---------------------------------------------------------------------------
# persistence


def _fmt(v: float) -> str:
    return format(v, ".17g")


def write_summary_csv(report: ExperimentReport, path: str) -> None:
    """One aggregate row per cell; identical reports write identical bytes."""
    cfg = report.config
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "method", "target", "coverage", "width", "mc_se",
                    "flag", "reps", "n_boot", "lambda_rule", "seed"))
        for c in report.cells:
            w.writerow((c.model, c.method, c.target, _fmt(c.coverage),
                        _fmt(c.mean_width), _fmt(c.mc_se), int(c.flagged),
                        c.n_reps, cfg.plan.n_boot, c.lambda_rule, cfg.seed))


def write_rep_log_csv(report: ExperimentReport, path: str) -> None:
    """Per-rep intervals; coverage and width of any cell recompute from the
    rows sharing its (model, method, target, lambda_rule)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "rep", "seed", "method", "target", "lambda_rule",
                    "lo", "hi", "contained"))
        for r in report.rep_log:
            w.writerow((r.model, r.rep, r.seed, r.method, r.target,
                        r.lambda_rule, _fmt(r.lo), _fmt(r.hi), int(r.contained)))
