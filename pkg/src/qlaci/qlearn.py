"""Backward-recursive Q-learning over T stages with arbitrary action codings.

Stage T regresses the raw terminal reward on the stage-T design. For t < T
the pseudo-outcome adds the best predicted future value,

    Ytilde_t = Y_t + max_a Q_{t+1}(H_{t+1}, a; beta_hat_{t+1}),

where the max runs by explicit enumeration over the K_{t+1} coded action
vectors, so one code path serves indicator, +1/-1, and custom codings alike.
Trajectories lacking a stage-(t+1) action contribute Ytilde_t = Y_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Dataset, StageDesign, design_rows, feature_matrix, present_mask
from .linreg import OlsFit, SingularDesignError, fit_ols

__all__ = [
    "FittedStage",
    "QFit",
    "Regime",
    "contrast_value",
    "extract_regime",
    "fit_qlearning",
    "q_matrix",
]


@dataclass(frozen=True, eq=False)
class FittedStage:
    """One stage's regression: OLS fit, the trajectory rows it used, the
    regressed pseudo-outcome, and the stage design metadata."""

    stage: int
    design: StageDesign
    rows: np.ndarray
    ols: OlsFit
    pseudo_outcome: np.ndarray
    pseudo_outcome_tag: str
    # best fitted next-stage value added to the raw reward, 0 where the
    # trajectory has no next-stage record and at the terminal stage
    future_value: np.ndarray

    @property
    def n_main(self) -> int:
        return len(self.design.main)

    @property
    def interaction_slice(self) -> slice:
        return slice(self.n_main, len(self.ols.beta))

    @property
    def beta_main(self) -> np.ndarray:
        return self.ols.beta[: self.n_main]

    @property
    def beta_interact(self) -> np.ndarray:
        return self.ols.beta[self.n_main:]

    def effective_coefficients(self, beta_interact: np.ndarray | None = None) -> np.ndarray:
        """Per-treatment interaction coefficients: row i is the vector e_i
        with Q(h, i) = H_0' beta_main + h' e_i, i.e. e_i = sum_j C[i,j] b_j
        for the base coefficient blocks b_j."""
        b = self.beta_interact if beta_interact is None else np.asarray(beta_interact)
        m = self.design.coding.shape[1]
        if m == 0:
            return np.zeros((self.design.n_treatments, len(self.design.interact)))
        return np.asarray(self.design.coding) @ b.reshape(m, -1)


@dataclass(frozen=True, eq=False)
class QFit:
    stages: tuple[FittedStage, ...]

    @property
    def n_stages(self) -> int:
        return len(self.stages)


@dataclass(frozen=True, eq=False)
class Regime:
    """Estimated decision rules: stage t maps the interaction feature vector
    to the lowest-code maximizer of the fitted stage-t Q-function."""

    effective: tuple[np.ndarray, ...]

    def decide(self, t: int, h: np.ndarray) -> int:
        vals = self.effective[t - 1] @ np.asarray(h, dtype=float)
        return int(np.argmax(vals)) + 1


def _future_value(ds: Dataset, nxt: FittedStage) -> tuple[np.ndarray, np.ndarray]:
    """Best fitted next-stage value per next-stage row: main-effect part plus
    the enumerated max of interaction parts over treatment codes."""
    sd = nxt.design
    H0 = feature_matrix(ds, sd.main, nxt.rows)
    H1 = feature_matrix(ds, sd.interact, nxt.rows)
    per_code = H1 @ nxt.effective_coefficients().T  # (rows, K)
    return H0 @ nxt.beta_main + per_code.max(axis=1), nxt.rows


def fit_qlearning(ds: Dataset) -> QFit:
    """Fit all stage regressions last to first and return them first to last.

    Each stage uses only trajectories carrying that stage's action. Singular
    stage designs surface as SingularDesignError tagged with the stage.
    """
    T = ds.spec.n_stages
    fitted: list[FittedStage] = []
    nxt: FittedStage | None = None
    for t in range(T, 0, -1):
        rows = np.flatnonzero(present_mask(ds, t))
        B, y_raw = design_rows(ds, t, rows)
        future = np.zeros(len(rows))
        if t == T:
            tag = "terminal reward"
        else:
            vals, frows = _future_value(ds, nxt)
            pos = {int(r): k for k, r in enumerate(rows)}
            for val, r in zip(vals, frows):
                k = pos.get(int(r))
                if k is not None:
                    future[k] = val
            tag = "reward plus best fitted future value"
        y = y_raw + future
        try:
            ols = fit_ols(B, y)
        except SingularDesignError as e:
            raise SingularDesignError(f"stage {t}: {e}") from e
        nxt = FittedStage(stage=t, design=ds.spec.stages[t - 1], rows=rows,
                          ols=ols, pseudo_outcome=y, pseudo_outcome_tag=tag,
                          future_value=future)
        fitted.append(nxt)
    return QFit(tuple(reversed(fitted)))


def q_matrix(fit: QFit, t: int, ds: Dataset) -> np.ndarray:
    """Fitted Q-values for every stage-t fit row at every treatment code:
    entry (i, a) is Q_t(H_t(row i), a; beta_hat_t)."""
    st = fit.stages[t - 1]
    H0 = feature_matrix(ds, st.design.main, st.rows)
    H1 = feature_matrix(ds, st.design.interact, st.rows)
    return H0 @ st.beta_main[:, None] + H1 @ st.effective_coefficients().T


def extract_regime(fit: QFit) -> Regime:
    return Regime(tuple(st.effective_coefficients() for st in fit.stages))


def contrast_value(fit: QFit, t: int, c: np.ndarray) -> float:
    """Linear combination c' beta_hat_t of the stage-t coefficients."""
    beta = fit.stages[t - 1].ols.beta
    c = np.asarray(c, dtype=float)
    if c.shape != beta.shape:
        raise ValueError(f"contrast length {c.shape} does not match {beta.shape}")
    return float(c @ beta)
