"""Trajectory data model, declarative design specification, and CSV ingestion
for multi-stage treatment data.

A trajectory is one subject's (covariates, action, reward) sequence across T
stages. A DesignSpec declares, per stage, the main-effect feature list, the
treatment-interaction feature list, and the action coding; from these the
stage design row is assembled as

    B_t = (H_{t,0}', C[a,1]*H_{t,1}', ..., C[a,m]*H_{t,1}')'

where C is the K x m coding matrix and a the integer treatment code. Feature
terms are products of named references only: "1", "X{s}_{j}" (stage-s
covariate j, 1-based), or "A{s}" (stage-s action label), all from stages
before the current one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "DataFormatError",
    "Dataset",
    "DesignSpec",
    "FeatureTerm",
    "StageDesign",
    "StageRecord",
    "Trajectory",
    "build_design",
    "design_rows",
    "feature_matrix",
    "indicator_coding",
    "contrast_coding",
    "load_csv",
    "present_mask",
    "subset",
    "write_csv",
]


class DataFormatError(ValueError):
    """Raised for malformed files, unknown columns, or out-of-range actions."""


FeatureTerm = tuple[str, ...]


def indicator_coding(n_treatments: int) -> np.ndarray:
    """K-1 indicator columns; code i lights column i, the last code is the
    reference level (all zeros)."""
    if n_treatments < 2:
        raise ValueError("indicator coding needs at least 2 treatments")
    return np.eye(n_treatments, n_treatments - 1)


def contrast_coding() -> np.ndarray:
    """Single +1/-1 column for a binary treatment: code 1 -> +1, code 2 -> -1."""
    return np.array([[1.0], [-1.0]])


def _same(a: float, b: float) -> bool:
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass(frozen=True, eq=False)
class StageRecord:
    """One stage of one trajectory: covariate values, integer treatment code
    in {1..K_t} (None when the subject was not randomized at this stage), and
    the stage reward."""

    covariates: tuple[float, ...]
    action: int | None
    reward: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StageRecord):
            return NotImplemented
        # nan covariates mark absent stages and compare equal
        return (self.action == other.action
                and len(self.covariates) == len(other.covariates)
                and _same(self.reward, other.reward)
                and all(_same(a, b) for a, b in zip(self.covariates, other.covariates)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    stages: tuple[StageRecord, ...]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.stages == other.stages


def _as_coding(coding: str | np.ndarray | Sequence[Sequence[float]], n_treatments: int) -> np.ndarray:
    if isinstance(coding, str):
        if coding == "indicator":
            mat = indicator_coding(n_treatments)
        elif coding == "contrast":
            if n_treatments != 2:
                raise ValueError("contrast coding is binary only")
            mat = contrast_coding()
        else:
            raise ValueError(f"unknown coding {coding!r}")
    else:
        mat = np.asarray(coding, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != n_treatments:
        raise ValueError("coding matrix must have one row per treatment code")
    if np.linalg.matrix_rank(mat) < mat.shape[1]:
        raise ValueError("coding matrix must have full column rank")
    mat = mat.copy()
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True, eq=False)
class StageDesign:
    """Declarative design for one stage.

    main / interact are the feature term lists for H_{t,0} and H_{t,1}.
    coding is "indicator", "contrast", or a custom K x m matrix with full
    column rank. action_labels maps code -> the numeric label stored in CSV
    files and substituted for "A{t}" feature references; defaults to +1/-1
    for contrast coding and 1..K otherwise. optional marks stages whose
    records may be absent (subjects not re-randomized).
    """

    n_covariates: int
    n_treatments: int
    main: tuple[FeatureTerm, ...]
    interact: tuple[FeatureTerm, ...]
    coding: np.ndarray = "contrast"  # type: ignore[assignment]
    action_labels: tuple[float, ...] | None = None
    optional: bool = False

    def __post_init__(self) -> None:
        mat = _as_coding(self.coding, self.n_treatments)
        object.__setattr__(self, "coding", mat)
        object.__setattr__(self, "main", tuple(tuple(t) for t in self.main))
        object.__setattr__(self, "interact", tuple(tuple(t) for t in self.interact))
        if self.action_labels is None:
            if isinstance(mat, np.ndarray) and mat.shape == (2, 1) and mat[0, 0] == 1.0 and mat[1, 0] == -1.0:
                labels = (1.0, -1.0)
            else:
                labels = tuple(float(k) for k in range(1, self.n_treatments + 1))
            object.__setattr__(self, "action_labels", labels)
        else:
            labels = tuple(float(v) for v in self.action_labels)
            if len(labels) != self.n_treatments or len(set(labels)) != len(labels):
                raise ValueError("action_labels must be distinct, one per treatment code")
            object.__setattr__(self, "action_labels", labels)

    @property
    def n_coding_cols(self) -> int:
        return self.coding.shape[1]

    @property
    def n_params(self) -> int:
        return len(self.main) + self.coding.shape[1] * len(self.interact)


@dataclass(frozen=True, eq=False)
class DesignSpec:
    stages: tuple[StageDesign, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("need at least one stage")
        if self.stages[0].optional:
            raise ValueError("stage 1 cannot be optional")
        for t, sd in enumerate(self.stages, start=1):
            for term in sd.main + sd.interact:
                for ref in term:
                    self._check_ref(ref, t)

    def _check_ref(self, ref: str, t: int) -> None:
        if ref == "1":
            return
        if ref.startswith("X"):
            body = ref[1:]
            if "_" in body:
                s_str, j_str = body.split("_", 1)
                if s_str.isdigit() and j_str.isdigit():
                    s, j = int(s_str), int(j_str)
                    if 1 <= s <= t and 1 <= j <= self.stages[s - 1].n_covariates:
                        return
        elif ref.startswith("A") and ref[1:].isdigit():
            s = int(ref[1:])
            if 1 <= s < t:
                return
        raise ValueError(f"feature reference {ref!r} does not resolve at stage {t}")

    @property
    def n_stages(self) -> int:
        return len(self.stages)


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    spec: DesignSpec

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if len(self.trajectories) < 1:
            raise ValueError("dataset must contain at least one trajectory")
        T = self.spec.n_stages
        for i, traj in enumerate(self.trajectories):
            if len(traj.stages) != T:
                raise DataFormatError(f"trajectory {i}: expected {T} stages, got {len(traj.stages)}")
            for t, (rec, sd) in enumerate(zip(traj.stages, self.spec.stages), start=1):
                if len(rec.covariates) != sd.n_covariates:
                    raise DataFormatError(f"trajectory {i}: stage {t} expects {sd.n_covariates} covariates")
                if rec.action is None:
                    if not sd.optional:
                        raise DataFormatError(f"trajectory {i}: stage {t} action missing")
                elif not 1 <= rec.action <= sd.n_treatments:
                    raise DataFormatError(f"trajectory {i}: stage {t} action out of range")
                if rec.action is not None and not math.isfinite(rec.reward):
                    raise DataFormatError(f"trajectory {i}: stage {t} reward not finite")

    @property
    def n(self) -> int:
        return len(self.trajectories)


def present_mask(ds: Dataset, t: int) -> np.ndarray:
    """Boolean mask of trajectories carrying a stage-t action."""
    return np.array([traj.stages[t - 1].action is not None for traj in ds.trajectories])


def subset(ds: Dataset, rows: Sequence[int] | np.ndarray) -> Dataset:
    """Dataset restricted to the given trajectory rows (duplicates allowed).

    Rows come from an already validated dataset, so per-trajectory checks
    are skipped; bootstrap resampling leans on this."""
    idx = np.asarray(rows)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if len(idx) < 1:
        raise ValueError("dataset must contain at least one trajectory")
    out = object.__new__(Dataset)
    object.__setattr__(out, "trajectories", tuple(ds.trajectories[int(i)] for i in idx))
    object.__setattr__(out, "spec", ds.spec)
    return out


def _variable_array(ds: Dataset, ref: str, rows: np.ndarray) -> np.ndarray:
    if ref == "1":
        return np.ones(len(rows))
    if ref.startswith("X"):
        s_str, j_str = ref[1:].split("_", 1)
        s, j = int(s_str), int(j_str)
        return np.array([ds.trajectories[i].stages[s - 1].covariates[j - 1] for i in rows])
    s = int(ref[1:])
    labels = ds.spec.stages[s - 1].action_labels
    out = np.empty(len(rows))
    for k, i in enumerate(rows):
        a = ds.trajectories[i].stages[s - 1].action
        out[k] = math.nan if a is None else labels[a - 1]
    return out


def feature_matrix(ds: Dataset, terms: Sequence[FeatureTerm], rows: np.ndarray | None = None) -> np.ndarray:
    """Evaluate product feature terms over the given trajectory rows
    (all rows when omitted); returns an (n_rows, len(terms)) matrix."""
    if rows is None:
        rows = np.arange(ds.n)
    else:
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
    cache: dict[str, np.ndarray] = {}
    cols = []
    for term in terms:
        col = np.ones(len(rows))
        for ref in term:
            if ref not in cache:
                cache[ref] = _variable_array(ds, ref, rows)
            col = col * cache[ref]
        cols.append(col)
    return np.column_stack(cols) if cols else np.empty((len(rows), 0))


def design_rows(ds: Dataset, t: int, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """build_design restricted to the given trajectory indices, which must
    all carry a stage-t action."""
    sd = ds.spec.stages[t - 1]
    M = feature_matrix(ds, sd.main, rows)
    I = feature_matrix(ds, sd.interact, rows)
    codes = np.array([ds.trajectories[i].stages[t - 1].action for i in rows], dtype=int)
    Crows = np.asarray(sd.coding)[codes - 1]  # (n, m)
    inter = (Crows[:, :, None] * I[:, None, :]).reshape(len(rows), -1)
    B = np.hstack([M, inter])
    y = np.array([ds.trajectories[i].stages[t - 1].reward for i in rows])
    return B, y


def build_design(ds: Dataset, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the stage-t design matrix and raw reward vector.

    Every trajectory must carry a stage-t record; callers filter to the
    re-randomized subset first (see present_mask/subset). Row i is
    (H_{t,0}', C[a_i,1]*H_{t,1}', ..., C[a_i,m]*H_{t,1}')'. Rank deficiency
    is not checked here.
    """
    pm = present_mask(ds, t)
    if not pm.all():
        raise DataFormatError(f"stage {t} action missing for {int((~pm).sum())} trajectories")
    return design_rows(ds, t, np.arange(ds.n))


def _columns(spec: DesignSpec) -> list[str]:
    cols = []
    for t, sd in enumerate(spec.stages, start=1):
        cols.extend(f"X{t}_{j}" for j in range(1, sd.n_covariates + 1))
        cols.append(f"A{t}")
        cols.append(f"Y{t}")
    return cols


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    return format(v, ".17g")


def load_csv(path: str, spec: DesignSpec) -> Dataset:
    """Parse a wide one-trajectory-per-row CSV (columns X{t}_{j}, A{t}, Y{t})
    into a Dataset under the given spec.

    Action cells hold the stage's action labels and map back to integer
    codes; an empty action cell is allowed only for optional stages and
    yields an absent stage record (empty covariate/reward cells parse to
    nan/0.0 there).
    """
    expected = _columns(spec)
    # single-covariate stages may drop the _1 suffix in the header
    alias = {f"X{t}": f"X{t}_1" for t, sd in enumerate(spec.stages, start=1)
             if sd.n_covariates == 1}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file: header row required") from None
        names = [alias.get(h, h) for h in header]
        if len(set(names)) != len(names):
            raise DataFormatError("duplicate column names")
        unknown = set(names) - set(expected)
        if unknown:
            raise DataFormatError(f"unknown column(s): {sorted(unknown)}")
        missing = set(expected) - set(names)
        if missing:
            raise DataFormatError(f"missing column(s): {sorted(missing)}")
        pos = {name: names.index(name) for name in expected}
        trajectories = []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(f"row {rownum}: expected {len(header)} cells, got {len(row)}")
            stages = []
            for t, sd in enumerate(spec.stages, start=1):
                a_cell = row[pos[f"A{t}"]].strip()
                if a_cell == "":
                    if not sd.optional:
                        raise DataFormatError(f"row {rownum}: stage {t} action missing")
                    action = None
                else:
                    try:
                        a_val = float(a_cell)
                    except ValueError:
                        raise DataFormatError(f"row {rownum}: bad action {a_cell!r}") from None
                    matches = [k + 1 for k, lab in enumerate(sd.action_labels) if lab == a_val]
                    if not matches:
                        raise DataFormatError(f"row {rownum}: stage {t} action out of range: {a_cell}")
                    action = matches[0]
                covs = []
                for j in range(1, sd.n_covariates + 1):
                    cell = row[pos[f"X{t}_{j}"]].strip()
                    if cell == "":
                        if action is not None:
                            raise DataFormatError(f"row {rownum}: X{t}_{j} missing")
                        covs.append(math.nan)
                    else:
                        try:
                            covs.append(float(cell))
                        except ValueError:
                            raise DataFormatError(f"row {rownum}: bad value in X{t}_{j}") from None
                y_cell = row[pos[f"Y{t}"]].strip()
                if y_cell == "":
                    if action is not None:
                        raise DataFormatError(f"row {rownum}: Y{t} missing")
                    reward = 0.0
                else:
                    try:
                        reward = float(y_cell)
                    except ValueError:
                        raise DataFormatError(f"row {rownum}: bad value in Y{t}") from None
                    if not math.isfinite(reward):
                        raise DataFormatError(f"row {rownum}: Y{t} not finite")
                stages.append(StageRecord(tuple(covs), action, reward))
            trajectories.append(Trajectory(tuple(stages)))
    if not trajectories:
        raise DataFormatError("no data rows")
    return Dataset(tuple(trajectories), spec)


def write_csv(ds: Dataset, path: str) -> None:
    """Write a Dataset back to the wide CSV layout; load_csv(write_csv(ds))
    reproduces ds exactly (absent stages round-trip through empty cells)."""
    cols = _columns(ds.spec)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for traj in ds.trajectories:
            row = []
            for t, (rec, sd) in enumerate(zip(traj.stages, ds.spec.stages), start=1):
                row.extend(_fmt(v) for v in rec.covariates)
                if rec.action is None:
                    row.append("")
                    row.append("" if rec.reward == 0.0 else _fmt(rec.reward))
                else:
                    row.append(_fmt(sd.action_labels[rec.action - 1]))
                    row.append(_fmt(rec.reward))
            writer.writerow(row)
