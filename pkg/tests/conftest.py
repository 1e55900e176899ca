"""Shared fixture builders: small random trial datasets in the shapes the
bounds, resampling, and comparator tests need."""

from __future__ import annotations

import numpy as np

from qlaci import Dataset, DesignSpec, StageDesign, StageRecord, Trajectory


def two_stage_spec(coding2="contrast", k2: int = 2, optional: bool = False,
                   labels2=None) -> DesignSpec:
    return DesignSpec(stages=(
        StageDesign(n_covariates=1, n_treatments=2,
                    main=(("1",), ("X1_1",)), interact=(("1",),),
                    coding="contrast"),
        StageDesign(n_covariates=1, n_treatments=k2,
                    main=(("1",), ("X2_1",)), interact=(("1",), ("X2_1",)),
                    coding=coding2, action_labels=labels2, optional=optional),
    ))


def two_stage_dataset(seed: int, n: int, coding2="contrast", k2: int = 2,
                      absent_frac: float = 0.0, effect: float = 1.0) -> Dataset:
    """Random two-stage trial with a stage-2 treatment effect of scale
    `effect` (0 gives a null second stage)."""
    spec = two_stage_spec(coding2=coding2, k2=k2, optional=absent_frac > 0)
    labels2 = spec.stages[1].action_labels
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n):
        x1 = rng.normal()
        a1 = int(rng.integers(1, 3))
        lab1 = 1.0 if a1 == 1 else -1.0
        y1 = 0.5 + 0.3 * x1 + 0.2 * lab1 + rng.normal()
        if rng.uniform() < absent_frac:
            rec2 = StageRecord(covariates=(float("nan"),), action=None, reward=0.0)
        else:
            x2 = 0.4 * x1 + rng.normal()
            a2 = int(rng.integers(1, k2 + 1))
            lab2 = float(labels2[a2 - 1])
            y2 = (1.0 - 0.5 * x2 + effect * (0.8 + 0.6 * x2) * lab2
                  + 0.3 * effect * lab2 ** 2 + rng.normal())
            rec2 = StageRecord(covariates=(x2,), action=a2, reward=y2)
        trajs.append(Trajectory(stages=(
            StageRecord(covariates=(x1,), action=a1, reward=y1), rec2)))
    return Dataset(trajectories=tuple(trajs), spec=spec)


def three_stage_spec() -> DesignSpec:
    return DesignSpec(stages=(
        StageDesign(n_covariates=1, n_treatments=2,
                    main=(("1",), ("X1_1",)), interact=(("1",),),
                    coding="contrast"),
        StageDesign(n_covariates=1, n_treatments=2,
                    main=(("1",), ("X2_1",)), interact=(("1",), ("X2_1",)),
                    coding="contrast"),
        StageDesign(n_covariates=1, n_treatments=2,
                    main=(("1",), ("X3_1",)), interact=(("1",),),
                    coding="contrast"),
    ))


def three_stage_dataset(seed: int, n: int) -> Dataset:
    spec = three_stage_spec()
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n):
        x1 = rng.normal()
        a1 = int(rng.integers(1, 3))
        l1 = 1.0 if a1 == 1 else -1.0
        y1 = 0.2 + 0.4 * x1 + 0.1 * l1 + rng.normal()
        x2 = 0.5 * x1 + rng.normal()
        a2 = int(rng.integers(1, 3))
        l2 = 1.0 if a2 == 1 else -1.0
        y2 = 0.6 - 0.2 * x2 + (0.5 + 0.9 * x2) * l2 + rng.normal()
        x3 = 0.5 * x2 + rng.normal()
        a3 = int(rng.integers(1, 3))
        l3 = 1.0 if a3 == 1 else -1.0
        y3 = 0.3 + 0.5 * x3 + 0.7 * l3 + rng.normal()
        trajs.append(Trajectory(stages=(
            StageRecord(covariates=(x1,), action=a1, reward=y1),
            StageRecord(covariates=(x2,), action=a2, reward=y2),
            StageRecord(covariates=(x3,), action=a3, reward=y3))))
    return Dataset(trajectories=tuple(trajs), spec=spec)


TERNARY_CODING = ((0.0, -0.5), (-1.0, 0.5), (1.0, 0.5))
