"""Built-in generative models for sequential randomized studies.

Three families are provided, all over -1/+1 covariates and uniformly
randomized treatments. A family is picked by suite name and a built-in
parameter setting by label (ex1..ex6 plus exA, exB, exC); custom
settings go straight through GenModelSpec. Writing b for the effect
coefficients and d for the transition weights:

two_stage_binary (7 coefficients)
    X1 ~ +-1 equal odds, A1 and A2 ~ +-1 equal odds,
    P(X2 = 1 | X1, A1) = expit(d1 X1 + d2 A1), Y1 = 0,
    Y2 = b1 + b2 X1 + b3 A1 + b4 X1 A1 + (b5 + b6 X2 + b7 A1) A2 + N(0, 1).

two_stage_ternary (10 coefficients)
    As above but the second action is one of three arms, each carrying a
    code row (c1, c2) from TERNARY_CODING:
    Y2 = b1 + b2 X1 + b3 A1 + b4 X1 A1
         + (b5 + b7 X2 + b9 A1) c1 + (b6 + b8 X2 + b10 A1) c2 + N(0, 1).

three_stage_binary (10 coefficients)
    Binary actions at three stages, P(X_{t+1} = 1 | X_t, A_t) =
    expit(d1 X_t + d2 A_t), Y1 = Y2 = 0,
    Y3 = b1 + b2 X1 + b3 A1 + b4 X1 A1 + (b5 + b6 X2 + b7 A1) A2
         + (b8 + b9 X3 + b10 A2) A3 + N(0, 1).

Beyond sampling, every model exposes its exact finite population (each
covariate/action path with probability and conditional mean reward) and
closed-form regularity diagnostics built on it: the probability of a
history whose treatment arms tie exactly, and a standardized effect
size for the gap between arms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .dataio import Dataset, DesignSpec, StageDesign, StageRecord, Trajectory

__all__ = [
    "GenModelSpec",
    "MODEL_LABELS",
    "SUITES",
    "TERNARY_CODING",
    "expit",
    "model_spec",
    "population",
    "regularity_measures",
    "simulate",
    "suite_design",
]

SUITES = ("two_stage_binary", "two_stage_ternary", "three_stage_binary")

# one code row per ternary arm; full column rank, columns sum to zero
TERNARY_CODING = ((0.0, -0.5), (-1.0, 0.5), (1.0, 0.5))

_EFFECT_LENGTHS = {
    "two_stage_binary": 7,
    "two_stage_ternary": 10,
    "three_stage_binary": 10,
}


@dataclass(frozen=True)
class GenModelSpec:
    """One generative model: a suite plus its numeric setting.

    effects holds the reward coefficients in the order written in the
    module docstring for the suite; transition holds the two expit
    weights (previous covariate, previous action) of each covariate
    transition.
    """

    suite: str
    label: str
    effects: tuple[float, ...]
    transition: tuple[float, float]

    def __post_init__(self) -> None:
        if self.suite not in _EFFECT_LENGTHS:
            raise ValueError(f"unknown suite {self.suite!r}; expected one of {SUITES}")
        eff = tuple(float(v) for v in self.effects)
        tr = tuple(float(v) for v in self.transition)
        if len(eff) != _EFFECT_LENGTHS[self.suite]:
            raise ValueError(
                f"suite {self.suite} takes {_EFFECT_LENGTHS[self.suite]} effect "
                f"coefficients, got {len(eff)}")
        if len(tr) != 2:
            raise ValueError("transition must hold exactly 2 weights")
        if not all(math.isfinite(v) for v in eff + tr):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "effects", eff)
        object.__setattr__(self, "transition", tr)

    @property
    def n_stages(self) -> int:
        return 3 if self.suite == "three_stage_binary" else 2


# Built-in settings, ordered within each suite from fully tied arms (ex1)
# through near-ties to well separated arms; regularity_measures reports
# where each sits.
_MODEL_TABLE: dict[str, dict[str, tuple[tuple[float, ...], tuple[float, float]]]] = {
    "two_stage_binary": {
        "ex1": ((0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0), (0.5, 0.5)),
        "ex2": ((0.0, 0.0, 0.0, 0.0, 0.01, 0.0, 0.0), (0.5, 0.5)),
        "ex3": ((0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.5), (0.5, 0.5)),
        "ex4": ((0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.49), (0.5, 0.5)),
        "ex5": ((0.0, 0.0, -0.5, 0.0, 1.0, 0.5, 0.5), (1.0, 0.0)),
        "ex6": ((0.0, 0.0, -0.5, 0.0, 0.25, 0.5, 0.5), (0.1, 0.1)),
        "exA": ((0.0, 0.0, -0.25, 0.0, 0.75, 0.5, 0.5), (0.1, 0.1)),
        "exB": ((0.0, 0.0, 0.0, 0.0, 0.25, 0.0, 0.25), (0.0, 0.0)),
        "exC": ((0.0, 0.0, 0.0, 0.0, 0.25, 0.0, 0.24), (0.0, 0.0)),
    },
    "two_stage_ternary": {
        "ex1": ((0.0,) * 10, (0.5, 0.5)),
        "ex2": ((0.0, 0.0, 0.0, 0.0, 0.01, 0.01, 0.0, 0.0, 0.0, 0.0), (0.5, 0.5)),
        "ex3": ((0.0, 0.0, -0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5, 0.5), (0.5, 0.5)),
        "ex4": ((0.0, 0.0, -0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.49, 0.49), (0.5, 0.5)),
        "ex5": ((0.0, 0.0, -0.5, 0.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5), (1.0, 0.0)),
        "ex6": ((0.0, 0.0, -0.5, 0.0, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5), (0.1, 0.1)),
        "exA": ((0.0, 0.0, -0.25, 0.0, 0.75, 0.75, 0.5, 0.5, 0.5, 0.5), (0.1, 0.1)),
        "exB": ((0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.0, 0.0, 0.25, 0.25), (0.0, 0.0)),
        "exC": ((0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.0, 0.0, 0.24, 0.24), (0.0, 0.0)),
    },
    "three_stage_binary": {
        "ex1": ((0.0,) * 10, (0.5, 0.5)),
        "ex2": ((0.0, 0.0, 0.0, 0.0, 0.01, 0.0, 0.0, 0.01, 0.0, 0.0), (0.5, 0.5)),
        "ex3": ((0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.5), (0.5, 0.5)),
        "ex4": ((0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.49, 0.5, 0.0, 0.49), (0.5, 0.5)),
        "ex5": ((0.0, 0.0, -0.5, 0.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5), (1.0, 0.0)),
        "ex6": ((0.0, 0.0, -0.5, 0.0, 0.12, 0.48, 0.5, 0.25, 0.5, 0.5), (0.1, 0.1)),
        "exA": ((0.0, 0.0, -0.25, 0.0, 0.36, 0.49, 0.5, 0.75, 0.5, 0.5), (0.1, 0.1)),
        "exB": ((0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.0, 0.25), (0.0, 0.0)),
        "exC": ((0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.24, 0.25, 0.0, 0.24), (0.0, 0.0)),
    },
}

MODEL_LABELS = tuple(_MODEL_TABLE["two_stage_binary"])


def model_spec(suite: str, label: str) -> GenModelSpec:
    """Look up a built-in setting by suite and label (label case-insensitive)."""
    try:
        table = _MODEL_TABLE[suite]
    except KeyError:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}") from None
    key = label.lower()
    for name, (effects, transition) in table.items():
        if name.lower() == key:
            return GenModelSpec(suite, name, effects, transition)
    raise ValueError(f"unknown model label {label!r}; expected one of {MODEL_LABELS}")


_MAIN2 = (("1",), ("X1_1",), ("A1",), ("X1_1", "A1"), ("X2_1",))
_INT2 = (("1",), ("X2_1",), ("A1",))
_MAIN3 = (("1",), ("X1_1",), ("A1",), ("X1_1", "A1"), ("X2_1",),
          ("A2",), ("X2_1", "A2"), ("A1", "A2"), ("X3_1",))
_INT3 = (("1",), ("X3_1",), ("A2",))


@lru_cache(maxsize=None)
def suite_design(suite: str) -> DesignSpec:
    """Analysis design paired with a suite's datasets.

    Each stage regresses on the full preceding covariate/action
    interaction pattern plus the newest covariate, with the treatment
    block interacting (1, newest covariate, previous action).
    """
    stage1 = StageDesign(1, 2, (("1",), ("X1_1",)), (("1",), ("X1_1",)), "contrast")
    if suite == "two_stage_binary":
        return DesignSpec((stage1, StageDesign(1, 2, _MAIN2, _INT2, "contrast")))
    if suite == "two_stage_ternary":
        return DesignSpec((stage1, StageDesign(1, 3, _MAIN2, _INT2, TERNARY_CODING)))
    if suite == "three_stage_binary":
        return DesignSpec((stage1,
                           StageDesign(1, 2, _MAIN2, _INT2, "contrast"),
                           StageDesign(1, 2, _MAIN3, _INT3, "contrast")))
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


def _mean_binary(eff, x1, a1, x2, a2):
    b1, b2, b3, b4, b5, b6, b7 = eff
    return (b1 + b2 * x1 + b3 * a1 + b4 * x1 * a1
            + (b5 + b6 * x2 + b7 * a1) * a2)


def _mean_ternary(eff, x1, a1, x2, c1, c2):
    b1, b2, b3, b4, b5, b6, b7, b8, b9, b10 = eff
    return (b1 + b2 * x1 + b3 * a1 + b4 * x1 * a1
            + (b5 + b7 * x2 + b9 * a1) * c1
            + (b6 + b8 * x2 + b10 * a1) * c2)


def _mean_three(eff, x1, a1, x2, a2, x3, a3):
    b1, b2, b3, b4, b5, b6, b7, b8, b9, b10 = eff
    return (b1 + b2 * x1 + b3 * a1 + b4 * x1 * a1
            + (b5 + b6 * x2 + b7 * a1) * a2
            + (b8 + b9 * x3 + b10 * a2) * a3)


def _signs(rng: np.random.Generator, p_up, n: int) -> np.ndarray:
    return np.where(rng.random(n) < p_up, 1.0, -1.0)


def simulate(spec: GenModelSpec, n: int, seed) -> Dataset:
    """Draw n trajectories; a given seed pins the whole dataset.

    Variables are drawn in fixed order (x1, a1, x2, a2, then x3 and a3
    for the three-stage suite, then the reward noise). Rewards before
    the final stage are zero by construction; the final reward is its
    conditional mean plus standard normal noise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    d1, d2 = spec.transition
    rng = np.random.default_rng(seed)
    x1 = _signs(rng, 0.5, n)
    a1 = _signs(rng, 0.5, n)
    x2 = _signs(rng, expit(d1 * x1 + d2 * a1), n)
    if spec.suite == "two_stage_binary":
        a2 = _signs(rng, 0.5, n)
        code2 = np.where(a2 > 0, 1, 2)
        mean = _mean_binary(spec.effects, x1, a1, x2, a2)
    elif spec.suite == "two_stage_ternary":
        code2 = rng.integers(1, 4, size=n)
        rows = np.asarray(TERNARY_CODING)[code2 - 1]
        mean = _mean_ternary(spec.effects, x1, a1, x2, rows[:, 0], rows[:, 1])
    else:
        a2 = _signs(rng, 0.5, n)
        code2 = np.where(a2 > 0, 1, 2)
        x3 = _signs(rng, expit(d1 * x2 + d2 * a2), n)
        a3 = _signs(rng, 0.5, n)
        code3 = np.where(a3 > 0, 1, 2)
        mean = _mean_three(spec.effects, x1, a1, x2, a2, x3, a3)
    y = mean + rng.standard_normal(n)
    code1 = np.where(a1 > 0, 1, 2)
    trajs = []
    if spec.suite == "three_stage_binary":
        for i in range(n):
            trajs.append(Trajectory((
                StageRecord((float(x1[i]),), int(code1[i]), 0.0),
                StageRecord((float(x2[i]),), int(code2[i]), 0.0),
                StageRecord((float(x3[i]),), int(code3[i]), float(y[i])),
            )))
    else:
        for i in range(n):
            trajs.append(Trajectory((
                StageRecord((float(x1[i]),), int(code1[i]), 0.0),
                StageRecord((float(x2[i]),), int(code2[i]), float(y[i])),
            )))
    return Dataset(tuple(trajs), suite_design(spec.suite))


def _prob_pair(z: float) -> tuple[float, float]:
    """(P(X = 1), P(X = -1)) for an expit(z) transition.

    The larger branch sits in [0.5, 1], so subtracting it from one is
    exact and the pair sums to exactly one; fsum over complete pairs
    then cancels bitwise, which keeps enumerated tie probabilities at
    their ideal dyadic values.
    """
    hi = float(expit(abs(z)))
    lo = 1.0 - hi
    return (hi, lo) if z >= 0 else (lo, hi)


_SIGNS = (1.0, -1.0)


def _two_stage_traj(x1: float, k1: int, x2: float, k2: int, m: float) -> Trajectory:
    return Trajectory((StageRecord((x1,), k1, 0.0),
                       StageRecord((x2,), k2, float(m))))


def population(spec: GenModelSpec) -> tuple[Dataset, np.ndarray]:
    """Exact finite population of a model.

    Returns one trajectory per covariate/action path, paired with the
    path probabilities. Final rewards hold the conditional mean of the
    path (the noise integrates to zero), so least squares weighted by
    the probabilities recovers population coefficients without any
    sampling. Paths enumerate in fixed draw order with +1 before -1
    and arm codes ascending.
    """
    d1, d2 = spec.transition
    eff = spec.effects
    trajs: list[Trajectory] = []
    probs: list[float] = []
    for x1 in _SIGNS:
        for k1, a1 in enumerate(_SIGNS, start=1):
            pair2 = _prob_pair(d1 * x1 + d2 * a1)
            for x2, px2 in zip(_SIGNS, pair2):
                p_hist = 0.25 * px2
                if spec.suite == "two_stage_binary":
                    for k2, a2 in enumerate(_SIGNS, start=1):
                        m = _mean_binary(eff, x1, a1, x2, a2)
                        trajs.append(_two_stage_traj(x1, k1, x2, k2, m))
                        probs.append(p_hist * 0.5)
                elif spec.suite == "two_stage_ternary":
                    for k2, (c1, c2) in enumerate(TERNARY_CODING, start=1):
                        m = _mean_ternary(eff, x1, a1, x2, c1, c2)
                        trajs.append(_two_stage_traj(x1, k1, x2, k2, m))
                        probs.append(p_hist / 3.0)
                else:
                    for k2, a2 in enumerate(_SIGNS, start=1):
                        pair3 = _prob_pair(d1 * x2 + d2 * a2)
                        for x3, px3 in zip(_SIGNS, pair3):
                            for k3, a3 in enumerate(_SIGNS, start=1):
                                m = _mean_three(eff, x1, a1, x2, a2, x3, a3)
                                trajs.append(Trajectory((
                                    StageRecord((x1,), k1, 0.0),
                                    StageRecord((x2,), k2, 0.0),
                                    StageRecord((x3,), k3, float(m)),
                                )))
                                probs.append(p_hist * 0.25 * px3)
    return Dataset(tuple(trajs), suite_design(spec.suite)), np.array(probs)


# enumeration dust is ~1e-16 while genuine arm gaps here are >= 0.01
_TIE_TOL = 1e-9
_VAR_TOL = 1e-18


def _arm_values(spec: GenModelSpec, stage: int) -> list[tuple[float, tuple[float, ...]]]:
    """Decision histories as (probability, per-arm optimal value) pairs."""
    d1, d2 = spec.transition
    eff = spec.effects
    pts: list[tuple[float, tuple[float, ...]]] = []
    for x1 in _SIGNS:
        for a1 in _SIGNS:
            pair2 = _prob_pair(d1 * x1 + d2 * a1)
            for x2, px2 in zip(_SIGNS, pair2):
                p_hist = 0.25 * px2
                if spec.suite == "two_stage_binary":
                    e = eff[4] + eff[5] * x2 + eff[6] * a1
                    pts.append((p_hist, (e, -e)))
                elif spec.suite == "two_stage_ternary":
                    s1 = eff[4] + eff[6] * x2 + eff[8] * a1
                    s2 = eff[5] + eff[7] * x2 + eff[9] * a1
                    pts.append((p_hist, tuple(c1 * s1 + c2 * s2
                                              for c1, c2 in TERNARY_CODING)))
                elif stage == 3:
                    for a2 in _SIGNS:
                        pair3 = _prob_pair(d1 * x2 + d2 * a2)
                        for x3, px3 in zip(_SIGNS, pair3):
                            e = eff[7] + eff[8] * x3 + eff[9] * a2
                            pts.append((p_hist * 0.5 * px3, (e, -e)))
                else:
                    # value of each second arm under the best final action
                    base = eff[0] + eff[1] * x1 + eff[2] * a1 + eff[3] * x1 * a1
                    vals = []
                    for a2 in _SIGNS:
                        lin = (eff[4] + eff[5] * x2 + eff[6] * a1) * a2
                        pair3 = _prob_pair(d1 * x2 + d2 * a2)
                        ev = math.fsum(px3 * abs(eff[7] + eff[8] * x3 + eff[9] * a2)
                                       for x3, px3 in zip(_SIGNS, pair3))
                        vals.append(base + lin + ev)
                    pts.append((p_hist, tuple(vals)))
    return pts


def regularity_measures(spec: GenModelSpec, stage: int | None = None) -> dict[str, float]:
    """Exact nonregularity diagnostics at a decision stage.

    p is the probability of drawing a history whose treatment arms all
    share one optimal continuation value; ties are what break the usual
    estimator asymptotics. phi standardizes the gap between arms: with
    two arms it is the signed mean/sd ratio of the first-minus-second
    arm value, and with more arms the mean magnitude of the pairwise
    ratios (which coincide for every built-in setting). Pairs whose gap
    is identically zero carry no information and are skipped; if every
    pair degenerates phi is nan, and a constant nonzero gap yields an
    infinite ratio.

    stage defaults to the last one. Three-stage models also accept
    stage 2, where each arm's value runs through the exact
    best-final-action continuation.
    """
    last = spec.n_stages
    if stage is None:
        stage = last
    if stage != last and not (spec.suite == "three_stage_binary" and stage == 2):
        raise ValueError(
            f"no regularity summary at stage {stage} for suite {spec.suite}; "
            "use the final stage, or stage 2 of the three-stage suite")
    pts = _arm_values(spec, stage)
    p = math.fsum(prob for prob, vals in pts
                  if max(vals) - min(vals) <= _TIE_TOL)
    n_arms = len(pts[0][1])
    ratios = []
    for i in range(n_arms):
        for j in range(i + 1, n_arms):
            mean = math.fsum(prob * (vals[i] - vals[j]) for prob, vals in pts)
            var = math.fsum(prob * (vals[i] - vals[j] - mean) ** 2
                            for prob, vals in pts)
            if var < _VAR_TOL:
                if abs(mean) <= _TIE_TOL:
                    continue
                ratios.append(math.copysign(math.inf, mean) if n_arms == 2 else math.inf)
            else:
                r = mean / math.sqrt(var)
                ratios.append(r if n_arms == 2 else abs(r))
    phi = math.fsum(ratios) / len(ratios) if ratios else math.nan
    return {"p": p, "phi": phi}
