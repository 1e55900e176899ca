"""Config-driven command line front end.

Commands: fit (coefficient tables and treatment-evidence intervals from a
CSV dataset), experiment (Monte Carlo coverage/width grids), toy (bias and
MSE sweep of the two-arm toy estimators), simulate (write a generated
dataset), true-params (exact population parameter table). Settings come
from one TOML file holding a section per command, overridden by flags;
every command is a pure function of its inputs and seed, so re-running
reproduces output files byte for byte. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:                         # Python 3.10
    import tomli as tomllib

import numpy as np

from .bounds import GammaSearch
from .comparators import toy_sweep
from .dataio import (DataFormatError, Dataset, DesignSpec, StageDesign,
                     feature_matrix, load_csv, present_mask, write_csv)
from .genmodels import MODEL_LABELS, SUITES, model_spec, simulate, suite_design
from .harness import (ExperimentConfig, ExperimentError, parse_target,
                      run_experiment, true_parameter)
from .linreg import SingularDesignError
from .pretest import parse_lambda_rule
from .qlearn import fit_qlearning
from .resample import (BootstrapPlan, RedrawLimitError, aci_interval,
                       cpb_interval)

__all__ = ["ConfigError", "main"]

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

THREADS_ENV = "QLACI_THREADS"

# scale presets: (mc_reps, n_boot)
_SCALES = {"desk": (200, 500), "paper": (1000, 1000)}


class ConfigError(ValueError):
    """A configuration file or flag value cannot be used."""


# ---------------------------------------------------------------------------
# config plumbing


_COMMANDS = ("fit", "experiment", "toy", "simulate", "true_params")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    unknown = set(cfg) - set(_COMMANDS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, allowed: tuple[str, ...]) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    return dict(sec)


def _merge_flags(sec: dict, args: argparse.Namespace, names: dict) -> dict:
    """Fold command line values over the config section; flags win."""
    out = dict(sec)
    for key, attr in names.items():
        val = getattr(args, attr)
        if val is not None:
            out[key] = val
    return out


def _need(sec: dict, key: str, command: str):
    if key not in sec:
        raise ConfigError(f"[{command}] needs {key!r} (config key or flag)")
    return sec[key]


def _string_list(val, what: str) -> list[str]:
    if isinstance(val, str):
        return [val]
    if isinstance(val, list) and all(isinstance(v, str) for v in val):
        return list(val)
    raise ConfigError(f"{what} must be a string or list of strings")


def _threads(sec: dict) -> int:
    if "threads" in sec:
        raw = sec["threads"]
    else:
        raw = os.environ.get(THREADS_ENV, 1)
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


# ---------------------------------------------------------------------------
# DesignSpec from config


def _parse_term(text) -> tuple[str, ...]:
    if not isinstance(text, str) or not text.strip():
        raise ConfigError(f"feature term must be a nonempty string, got {text!r}")
    return tuple(part.strip() for part in text.split("*"))


_STAGE_KEYS = ("covariates", "treatments", "main", "interact", "coding",
               "action_labels", "optional")


def _parse_design(obj) -> DesignSpec:
    """Stage list from the config's design table.

    Each stage gives covariates, treatments, main and interact term lists
    (terms multiply refs with '*', e.g. "X1_1*A1"), and optionally coding
    ("contrast", "indicator", or a matrix), action_labels, and optional.
    """
    if not isinstance(obj, dict) or "stages" not in obj:
        raise ConfigError("design needs a 'stages' list")
    unknown = set(obj) - {"stages"}
    if unknown:
        raise ConfigError(f"unknown design key(s): {sorted(unknown)}")
    stages = obj["stages"]
    if not isinstance(stages, list) or not stages:
        raise ConfigError("design.stages must be a nonempty list")
    built = []
    for i, st in enumerate(stages, start=1):
        if not isinstance(st, dict):
            raise ConfigError(f"design stage {i} must be a table")
        unknown = set(st) - set(_STAGE_KEYS)
        if unknown:
            raise ConfigError(f"unknown key(s) in design stage {i}: {sorted(unknown)}")
        try:
            built.append(StageDesign(
                n_covariates=int(_need(st, "covariates", f"design stage {i}")),
                n_treatments=int(_need(st, "treatments", f"design stage {i}")),
                main=tuple(_parse_term(t) for t in
                           _need(st, "main", f"design stage {i}")),
                interact=tuple(_parse_term(t) for t in
                               _need(st, "interact", f"design stage {i}")),
                coding=st.get("coding", "contrast"),
                action_labels=(tuple(st["action_labels"])
                               if "action_labels" in st else None),
                optional=bool(st.get("optional", False))))
        except ValueError as e:
            raise ConfigError(f"design stage {i}: {e}") from None
    try:
        return DesignSpec(tuple(built))
    except ValueError as e:
        raise ConfigError(f"design: {e}") from None


# ---------------------------------------------------------------------------
# output helpers


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".4g")
    return str(v)


def _render(headers: tuple[str, ...], rows: list[tuple]) -> str:
    """Aligned plain-text table; first column left, the rest right."""
    cells = [tuple(_fmt_cell(v) for v in row) for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def line(vals):
        parts = [vals[0].ljust(widths[0])]
        parts += [v.rjust(w) for v, w in zip(vals[1:], widths[1:])]
        return "  ".join(parts).rstrip()
    out = [line(headers), line(tuple("-" * w for w in widths))]
    out.extend(line(r) for r in cells)
    return "\n".join(out)


def _fmt17(v: float) -> str:
    return format(v, ".17g")


def _write_rows(path: str, headers: tuple[str, ...], rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(headers)
        for row in rows:
            w.writerow(tuple(_fmt17(v) if isinstance(v, float) else v
                             for v in row))


def _pct_labels(alpha: float) -> tuple[str, str]:
    return (f"lower ({100 * alpha / 2:g}%)", f"upper ({100 * (1 - alpha / 2):g}%)")


# ---------------------------------------------------------------------------
# fit


_FIT_KEYS = ("data", "design", "alpha", "n_boot", "max_redraws", "seed",
             "lambda", "n_gamma", "box_multiplier", "out")


def _term_label(term: tuple[str, ...]) -> str:
    return "*".join(term)


def _coef_names(sd: StageDesign, t: int) -> list[str]:
    """One label per coefficient: main terms, then each coding column
    crossed with the interact terms."""
    names = [_term_label(term) for term in sd.main]
    m = sd.coding.shape[1]
    for g in range(m):
        col = f"A{t}" if m == 1 else f"A{t}[{g + 1}]"
        for term in sd.interact:
            names.append(col if term == ("1",) else f"{col}:{_term_label(term)}")
    return names


def _evidence_rows(ds: Dataset, t: int, interval_for) -> list[tuple]:
    """Per-history treatment-difference intervals for a binary stage: one
    row per distinct observed interact-feature pattern, labeled sufficient
    exactly when the interval excludes zero."""
    sd = ds.spec.stages[t - 1]
    rows_present = np.flatnonzero(present_mask(ds, t))
    H1 = feature_matrix(ds, sd.interact, rows_present)
    patterns = np.unique(H1, axis=0)
    d0 = len(sd.main)
    out = []
    for h in patterns:
        c = np.concatenate([np.zeros(d0), h])
        lo, hi = interval_for(t, c)
        history = ", ".join(f"{_term_label(term)}={val:g}"
                            for term, val in zip(sd.interact, h)
                            if term != ("1",)) or "all"
        contrast = "(" + " ".join(f"{v:g}" for v in h) + ")"
        verdict = ("Insufficient evidence" if lo <= 0.0 <= hi
                   else "Sufficient evidence")
        out.append((t, history, contrast, float(lo), float(hi), verdict))
    return out


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    sec = _merge_flags(_section(cfg, "fit", _FIT_KEYS), args,
                       {"data": "data", "alpha": "alpha", "seed": "seed",
                        "n_boot": "n_boot", "lambda": "lambda_rule",
                        "out": "out"})
    design = _parse_design(_need(sec, "design", "fit"))
    data_path = _need(sec, "data", "fit")
    alpha = float(sec.get("alpha", 0.05))
    try:
        rule = parse_lambda_rule(str(sec.get("lambda", "loglog")))
        plan = BootstrapPlan(n_boot=int(sec.get("n_boot", 1000)),
                             seed=int(sec.get("seed", 0)),
                             max_redraws=int(sec.get("max_redraws", 25)))
        search = GammaSearch(n_gamma=int(sec.get("n_gamma", 1000)),
                             box_halfwidth_multiplier=float(
                                 sec.get("box_multiplier", 5.0)))
    except ValueError as e:
        raise ConfigError(str(e)) from None

    ds = load_csv(data_path, design)
    if args.validate:
        print(f"config ok; {ds.n} trajectories, {design.n_stages} stages")
        return 0

    fit = fit_qlearning(ds)

    def interval_for(t: int, c: np.ndarray) -> tuple[float, float]:
        # adaptive intervals guard the max-induced first stage; later
        # stages are plain regressions, so the centered bootstrap serves
        if t == 1:
            iv = aci_interval(ds, fit, c, rule, search, plan, alpha)
        else:
            def stat(d: Dataset, _t=t, _c=c) -> float:
                return float(_c @ fit_qlearning(d).stages[_t - 1].ols.beta)
            iv = cpb_interval(ds, stat, plan, alpha)
        return iv.lo, iv.hi

    lo_lab, hi_lab = _pct_labels(alpha)
    coef_rows = []
    for t, sd in enumerate(design.stages, start=1):
        beta = fit.stages[t - 1].ols.beta
        names = _coef_names(sd, t)
        method = "aci" if t == 1 else "cpb"
        for j, name in enumerate(names):
            c = np.zeros(len(names))
            c[j] = 1.0
            lo, hi = interval_for(t, c)
            coef_rows.append((t, method, name, float(beta[j]), lo, hi))

    evidence = []
    for t, sd in enumerate(design.stages, start=1):
        if sd.n_treatments == 2 and sd.coding.shape[1] == 1:
            evidence.extend(_evidence_rows(ds, t, interval_for))

    for t in range(1, design.n_stages + 1):
        rows = [r[2:] for r in coef_rows if r[0] == t]
        method = "aci" if t == 1 else "cpb"
        print(f"\nstage {t} coefficients ({method}, {ds.n} trajectories)")
        print(_render(("term", "estimate", lo_lab, hi_lab), rows))
    if evidence:
        print("\ntreatment evidence per history")
        print(_render(("stage", "history", "contrast", lo_lab, hi_lab,
                       "conclusion"),
                      [(str(r[0]),) + r[1:] for r in evidence]))

    if "out" in sec:
        out_dir = str(sec["out"])
        os.makedirs(out_dir, exist_ok=True)
        _write_rows(os.path.join(out_dir, "coefficients.csv"),
                    ("stage", "method", "term", "estimate", "lower", "upper"),
                    coef_rows)
        _write_rows(os.path.join(out_dir, "evidence.csv"),
                    ("stage", "history", "contrast", "lower", "upper",
                     "conclusion"),
                    evidence)
    return 0


# ---------------------------------------------------------------------------
# experiment


_EXPERIMENT_KEYS = ("suite", "models", "methods", "targets", "n", "mc_reps",
                    "n_boot", "max_redraws", "lambda_rules", "alpha", "seed",
                    "scale", "out", "threads", "n_gamma", "box_multiplier",
                    "st_denominator", "failure_budget")


def _experiment_config(sec: dict) -> ExperimentConfig:
    suite = str(_need(sec, "suite", "experiment"))
    try:
        design = suite_design(suite)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    mc_reps, n_boot = sec.get("mc_reps"), sec.get("n_boot")
    if "scale" in sec:
        try:
            preset = _SCALES[str(sec["scale"])]
        except KeyError:
            raise ConfigError(
                f"unknown scale {sec['scale']!r}; expected desk or paper") from None
        mc_reps = preset[0] if mc_reps is None else mc_reps
        n_boot = preset[1] if n_boot is None else n_boot

    try:
        targets = tuple(parse_target(t, design)
                        for t in _string_list(sec.get("targets", []), "targets"))
        rules = tuple(parse_lambda_rule(r) for r in
                      _string_list(sec.get("lambda_rules", ["loglog"]),
                                   "lambda_rules"))
        return ExperimentConfig(
            suite=suite,
            models=tuple(_string_list(_need(sec, "models", "experiment"),
                                      "models")),
            methods=tuple(_string_list(sec.get("methods", ["aci"]), "methods")),
            targets=targets,
            n=int(sec.get("n", 150)),
            mc_reps=int(200 if mc_reps is None else mc_reps),
            plan=BootstrapPlan(n_boot=int(500 if n_boot is None else n_boot),
                               max_redraws=int(sec.get("max_redraws", 25))),
            lambda_rules=rules,
            alpha=float(sec.get("alpha", 0.05)),
            seed=int(sec.get("seed", 0)),
            search=GammaSearch(n_gamma=int(sec.get("n_gamma", 1000)),
                               box_halfwidth_multiplier=float(
                                   sec.get("box_multiplier", 5.0))),
            st_denominator=str(sec.get("st_denominator", "abs")),
            failure_budget=float(sec.get("failure_budget", 0.01)),
            out_dir=(str(sec["out"]) if "out" in sec else None),
            threads=_threads(sec))
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    sec = _merge_flags(_section(cfg, "experiment", _EXPERIMENT_KEYS), args,
                       {"suite": "suite", "models": "models",
                        "methods": "methods", "scale": "scale", "n": "n",
                        "mc_reps": "mc_reps", "n_boot": "n_boot",
                        "seed": "seed", "out": "out", "threads": "threads",
                        "alpha": "alpha"})
    config = _experiment_config(sec)
    if args.validate:
        cells = len(config.models) * len(config.cell_keys())
        print(f"config ok; {cells} cells at {config.mc_reps} reps each")
        return 0
    report = run_experiment(config)
    rows = [(c.model, c.method, c.target, c.lambda_rule, c.coverage,
             c.mean_width, c.mc_se, "*" if c.flagged else "", c.n_reps,
             c.n_failed)
            for c in report.cells]
    print(_render(("model", "method", "target", "lambda", "coverage",
                   "width", "mc_se", "flag", "reps", "failed"), rows))
    if config.out_dir is not None:
        print(f"\nwrote summary.csv and replications.csv to {config.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# toy


_TOY_KEYS = ("mu_grid", "lambda_grid", "reps", "seed", "out")


def cmd_toy(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    sec = _merge_flags(_section(cfg, "toy", _TOY_KEYS), args,
                       {"reps": "reps", "seed": "seed", "out": "out"})
    mu_grid = sec.get("mu_grid", [0.0])
    lambda_grid = sec.get("lambda_grid", [0.0])
    reps = int(sec.get("reps", 100_000))
    seed = int(sec.get("seed", 0))
    for name, grid in (("mu_grid", mu_grid), ("lambda_grid", lambda_grid)):
        if not isinstance(grid, list) or not grid or not all(
                isinstance(v, (int, float)) for v in grid):
            raise ConfigError(f"{name} must be a nonempty list of numbers")
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if any(l < 0 for l in lambda_grid):
        raise ConfigError("lambda_grid values cannot be negative")
    if args.validate:
        print(f"config ok; {len(mu_grid) * len(lambda_grid) * 3} grid rows")
        return 0
    rows = toy_sweep(mu_grid, lambda_grid, reps, seed)
    table = [(r["method"], r["mu_diff"], r["lambda"], r["bias"], r["mse"],
              r["reps"], r["mc_se"]) for r in rows]
    headers = ("method", "mu_diff", "lambda", "bias", "mse", "reps", "mc_se")
    if "out" in sec:
        _write_rows(str(sec["out"]), headers, table)
        print(f"wrote {len(table)} rows to {sec['out']}")
    else:
        print(_render(headers, table))
    return 0


# ---------------------------------------------------------------------------
# simulate


_SIMULATE_KEYS = ("suite", "model", "n", "seed", "out")


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    sec = _merge_flags(_section(cfg, "simulate", _SIMULATE_KEYS), args,
                       {"suite": "suite", "model": "model", "n": "n",
                        "seed": "seed", "out": "out"})
    try:
        spec = model_spec(str(_need(sec, "suite", "simulate")),
                          str(_need(sec, "model", "simulate")))
        n = int(sec.get("n", 150))
        if n < 1:
            raise ValueError("n must be >= 1")
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = str(_need(sec, "out", "simulate"))
    if args.validate:
        print(f"config ok; would write {n} trajectories of {spec.suite}/"
              f"{spec.label}")
        return 0
    ds = simulate(spec, n, int(sec.get("seed", 0)))
    write_csv(ds, out)
    print(f"wrote {ds.n} trajectories to {out}")
    return 0


# ---------------------------------------------------------------------------
# true-params


_TRUE_KEYS = ("suite", "models", "targets", "out")


def cmd_true_params(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    sec = _merge_flags(_section(cfg, "true_params", _TRUE_KEYS), args,
                       {"suite": "suite", "models": "models", "out": "out"})
    suite = str(_need(sec, "suite", "true_params"))
    try:
        design = suite_design(suite)
        labels = _string_list(sec.get("models", list(MODEL_LABELS)), "models")
        specs = [model_spec(suite, label) for label in labels]
        targets = [(t, parse_target(t, design)) for t in
                   _string_list(sec.get("targets", ["stage1.action.1"]),
                                "targets")]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if args.validate:
        print(f"config ok; {len(specs) * len(targets)} values")
        return 0
    rows = [(spec.label, text,
             true_parameter(spec, tg.stage, np.asarray(tg.contrast)))
            for spec in specs for text, tg in targets]
    headers = ("model", "target", "value")
    if "out" in sec:
        _write_rows(str(sec["out"]), headers, rows)
        print(f"wrote {len(rows)} rows to {sec['out']}")
    else:
        print(_render(headers, rows))
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", default=None,
                   help="TOML config file with a section per command")
    p.add_argument("--validate", action="store_true",
                   help="check config (and data) without computing")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qlaci",
        description="Q-learning with adaptive confidence intervals")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a CSV dataset and print interval tables")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset CSV path")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--n-boot", dest="n_boot", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_rule", default=None,
                   help="threshold rule, e.g. loglog or fixed:1.5")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("experiment", help="run a Monte Carlo coverage grid")
    _add_common(p)
    p.add_argument("--suite", default=None, choices=SUITES)
    p.add_argument("--models", nargs="+", default=None)
    p.add_argument("--methods", nargs="+", default=None)
    p.add_argument("--scale", default=None, choices=sorted(_SCALES))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--mc-reps", dest="mc_reps", type=int, default=None)
    p.add_argument("--n-boot", dest="n_boot", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("toy", help="bias/MSE sweep of the two-arm toy problem")
    _add_common(p)
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("simulate", help="write a generated dataset CSV")
    _add_common(p)
    p.add_argument("--suite", default=None, choices=SUITES)
    p.add_argument("--model", default=None)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("true-params", help="exact population parameter table")
    _add_common(p)
    p.add_argument("--suite", default=None, choices=SUITES)
    p.add_argument("--models", nargs="+", default=None)
    p.set_defaults(func=cmd_true_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (SingularDesignError, RedrawLimitError, ExperimentError,
            np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
