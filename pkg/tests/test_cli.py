"""End-to-end checks of the command line front end.

Most tests call main() in process and inspect stdout or output files; one
subprocess run proves the module entry point works outside pytest.
"""

import csv
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from qlaci.cli import main
from qlaci.dataio import load_csv
from qlaci.genmodels import MODEL_LABELS, model_spec, simulate, suite_design
from qlaci.harness import parse_target, true_parameter


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# fit


@pytest.fixture(scope="module")
def behavior_csv(tmp_path_factory):
    """Response-adaptive two-stage trial shape: three baseline covariates,
    binary first treatment, only part of the sample re-randomized at stage 2
    with two stage-2 covariates. Gives 6 stage-1 and 10 stage-2 coefficients
    under the config below."""
    rng = np.random.default_rng(20260816)
    n = 150
    x11, x12, x13 = (rng.choice([-1.0, 1.0], size=n) for _ in range(3))
    a1 = rng.choice([-1.0, 1.0], size=n)
    rerand = rng.random(n) < 0.55
    x21 = rng.choice([-1.0, 1.0], size=n)
    x22 = rng.choice([-1.0, 1.0], size=n)
    a2 = rng.choice([-1.0, 1.0], size=n)
    noise = rng.standard_normal(n)
    y_absent = 0.4 * x13 + 0.5 * a1 + noise
    y_present = (0.3 * x13 + 0.25 * a1
                 + (0.6 + 0.5 * x21 - 0.2 * a1) * a2 + noise)
    path = tmp_path_factory.mktemp("fitdata") / "trial.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["X1_1", "X1_2", "X1_3", "A1", "Y1",
                    "X2_1", "X2_2", "A2", "Y2"])
        for i in range(n):
            if rerand[i]:
                w.writerow([x11[i], x12[i], x13[i], a1[i], 0.0,
                            x21[i], x22[i], a2[i], y_present[i]])
            else:
                w.writerow([x11[i], x12[i], x13[i], a1[i], y_absent[i],
                            "", "", "", ""])
    return str(path)


def _fit_config(path, data, out=None, alpha=None):
    lines = [
        "[fit]",
        f'data = "{data}"',
        "n_boot = 40",
        "n_gamma = 30",
        "seed = 11",
    ]
    if alpha is not None:
        lines.append(f"alpha = {alpha}")
    if out is not None:
        lines.append(f'out = "{out}"')
    lines.append(textwrap.dedent("""
        [[fit.design.stages]]
        covariates = 3
        treatments = 2
        main = ["1", "X1_1", "X1_2", "X1_3"]
        interact = ["1", "X1_3"]

        [[fit.design.stages]]
        covariates = 2
        treatments = 2
        optional = true
        main = ["1", "X1_1", "X1_2", "X2_2", "X1_3", "X2_1", "A1"]
        interact = ["1", "X2_1", "A1"]
    """))
    path.write_text("\n".join(lines))
    return str(path)


class TestFit:
    def test_coefficient_table_shapes(self, behavior_csv, tmp_path):
        out = tmp_path / "out"
        cfg = _fit_config(tmp_path / "fit.toml", behavior_csv, out=out)
        assert main(["fit", cfg]) == 0
        coef = _read_csv(out / "coefficients.csv")
        assert sum(r["stage"] == "1" for r in coef) == 6
        assert sum(r["stage"] == "2" for r in coef) == 10
        assert {r["method"] for r in coef if r["stage"] == "1"} == {"aci"}
        assert {r["method"] for r in coef if r["stage"] == "2"} == {"cpb"}
        for r in coef:
            assert float(r["lower"]) <= float(r["estimate"]) <= float(r["upper"])

    def test_evidence_rows_match_zero_containment(self, behavior_csv, tmp_path):
        out = tmp_path / "out"
        cfg = _fit_config(tmp_path / "fit.toml", behavior_csv, out=out)
        assert main(["fit", cfg]) == 0
        rows = _read_csv(out / "evidence.csv")
        # one row per distinct history: stage 1 has X1_3 = +/-1, stage 2
        # crosses X2_1 with A1
        assert sum(r["stage"] == "1" for r in rows) == 2
        assert sum(r["stage"] == "2" for r in rows) == 4
        verdicts = set()
        for r in rows:
            lo, hi = float(r["lower"]), float(r["upper"])
            expected = ("Insufficient evidence" if lo <= 0.0 <= hi
                        else "Sufficient evidence")
            assert r["conclusion"] == expected
            verdicts.add(r["conclusion"])
        # the strong stage-2 effect must make at least one row decisive
        assert "Sufficient evidence" in verdicts

    def test_interval_labels_follow_alpha(self, behavior_csv, tmp_path, capsys):
        cfg = _fit_config(tmp_path / "fit.toml", behavior_csv, alpha=0.1)
        assert main(["fit", cfg]) == 0
        text = capsys.readouterr().out
        assert "lower (5%)" in text and "upper (95%)" in text
        assert "stage 1 coefficients (aci" in text
        assert "stage 2 coefficients (cpb" in text

    def test_default_alpha_labels(self, behavior_csv, tmp_path, capsys):
        cfg = _fit_config(tmp_path / "fit.toml", behavior_csv)
        assert main(["fit", cfg]) == 0
        text = capsys.readouterr().out
        assert "lower (2.5%)" in text and "upper (97.5%)" in text

    def test_reruns_are_byte_identical(self, behavior_csv, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cfg1 = _fit_config(tmp_path / "f1.toml", behavior_csv, out=out1)
        cfg2 = _fit_config(tmp_path / "f2.toml", behavior_csv, out=out2)
        assert main(["fit", cfg1]) == 0
        assert main(["fit", cfg2]) == 0
        for name in ("coefficients.csv", "evidence.csv"):
            assert _read_bytes(out1 / name) == _read_bytes(out2 / name)

    def test_validate_checks_data_without_output(self, behavior_csv, tmp_path,
                                                 capsys):
        out = tmp_path / "out"
        cfg = _fit_config(tmp_path / "fit.toml", behavior_csv, out=out)
        assert main(["fit", cfg, "--validate"]) == 0
        assert "150 trajectories" in capsys.readouterr().out
        assert not out.exists()

    def test_validate_still_catches_data_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("X1_1,A1,Y1,bogus\n1,-1,0.5,1\n")
        cfg = _fit_config(tmp_path / "fit.toml", bad)
        assert main(["fit", cfg, "--validate"]) == 3
        assert "unknown column" in capsys.readouterr().err

    def test_singular_fit_exits_4(self, tmp_path, capsys):
        ds = simulate(model_spec("two_stage_binary", "ex3"), 4, 2)
        data = tmp_path / "tiny.csv"
        from qlaci.dataio import write_csv
        write_csv(ds, str(data))
        cfg = tmp_path / "fit.toml"
        cfg.write_text(textwrap.dedent(f"""
            [fit]
            data = "{data}"

            [[fit.design.stages]]
            covariates = 1
            treatments = 2
            main = ["1", "X1_1"]
            interact = ["1", "X1_1"]

            [[fit.design.stages]]
            covariates = 1
            treatments = 2
            main = ["1", "X1_1", "A1", "X1_1*A1", "X2_1"]
            interact = ["1", "X2_1", "A1"]
        """))
        assert main(["fit", str(cfg)]) == 4
        assert "numerical failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# experiment


def _experiment_config(path, out=None, **overrides):
    sec = {
        "suite": '"two_stage_binary"',
        "models": '["ex1", "ex3"]',
        "methods": '["aci", "cpb"]',
        "n": 40,
        "mc_reps": 3,
        "n_boot": 9,
        "n_gamma": 20,
        "lambda_rules": '["loglog"]',
        "seed": 3,
    }
    sec.update(overrides)
    if out is not None:
        sec["out"] = f'"{out}"'
    path.write_text("[experiment]\n"
                    + "\n".join(f"{k} = {v}" for k, v in sec.items()) + "\n")
    return str(path)


class TestExperiment:
    def test_summary_covers_requested_grid(self, tmp_path, capsys):
        out = tmp_path / "res"
        cfg = _experiment_config(tmp_path / "e.toml", out=out)
        assert main(["experiment", cfg]) == 0
        text = capsys.readouterr().out
        assert "coverage" in text and "width" in text
        rows = _read_csv(out / "summary.csv")
        assert len(rows) == 4
        assert {r["model"] for r in rows} == {"ex1", "ex3"}
        assert {r["method"] for r in rows} == {"aci", "cpb"}
        reps = _read_csv(out / "replications.csv")
        assert len(reps) == 2 * 2 * 3

    def test_model_and_method_flags_filter(self, tmp_path):
        out = tmp_path / "res"
        cfg = _experiment_config(tmp_path / "e.toml", out=out)
        assert main(["experiment", cfg, "--models", "ex1",
                     "--methods", "aci"]) == 0
        rows = _read_csv(out / "summary.csv")
        assert {r["model"] for r in rows} == {"ex1"}
        assert {r["method"] for r in rows} == {"aci"}

    def test_reruns_are_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["experiment",
                     _experiment_config(tmp_path / "e1.toml", out=out1)]) == 0
        assert main(["experiment",
                     _experiment_config(tmp_path / "e2.toml", out=out2)]) == 0
        for name in ("summary.csv", "replications.csv"):
            assert _read_bytes(out1 / name) == _read_bytes(out2 / name)

    def test_flag_overrides_config_seed(self, tmp_path):
        out1, out2, out3 = tmp_path / "s1", tmp_path / "s2", tmp_path / "s3"
        cfg = _experiment_config(tmp_path / "e1.toml", out=out1, seed=3)
        assert main(["experiment", cfg, "--seed", "9"]) == 0
        assert main(["experiment",
                     _experiment_config(tmp_path / "e2.toml", out=out2,
                                        seed=9)]) == 0
        assert main(["experiment",
                     _experiment_config(tmp_path / "e3.toml", out=out3,
                                        seed=3)]) == 0
        assert (_read_bytes(out1 / "summary.csv")
                == _read_bytes(out2 / "summary.csv"))
        assert (_read_bytes(out1 / "summary.csv")
                != _read_bytes(out3 / "summary.csv"))

    def test_scale_presets(self, tmp_path, capsys):
        cfg = _experiment_config(tmp_path / "e.toml")
        # a bare config with no sizes picks them up from the preset
        base = tmp_path / "bare.toml"
        base.write_text(textwrap.dedent("""
            [experiment]
            suite = "two_stage_binary"
            models = ["ex1"]
            scale = "desk"
        """))
        assert main(["experiment", str(base), "--validate"]) == 0
        assert "200 reps" in capsys.readouterr().out
        assert main(["experiment", str(base), "--scale", "paper",
                     "--validate"]) == 0
        assert "1000 reps" in capsys.readouterr().out
        # explicit sizes beat the preset
        assert main(["experiment", cfg, "--scale", "paper",
                     "--validate"]) == 0
        assert "3 reps" in capsys.readouterr().out

    def test_validate_reports_cell_count(self, tmp_path, capsys):
        cfg = _experiment_config(tmp_path / "e.toml")
        assert main(["experiment", cfg, "--validate"]) == 0
        assert "4 cells" in capsys.readouterr().out

    def test_unknown_scale_rejected(self, tmp_path, capsys):
        cfg = _experiment_config(tmp_path / "e.toml", scale='"huge"')
        assert main(["experiment", cfg]) == 2
        assert "unknown scale" in capsys.readouterr().err

    def test_threads_env_and_flag(self, tmp_path, monkeypatch, capsys):
        cfg = _experiment_config(tmp_path / "e.toml")
        monkeypatch.setenv("QLACI_THREADS", "2")
        assert main(["experiment", cfg, "--validate"]) == 0
        capsys.readouterr()
        monkeypatch.setenv("QLACI_THREADS", "oops")
        assert main(["experiment", cfg, "--validate"]) == 2
        assert "thread count" in capsys.readouterr().err
        # an explicit flag wins before the env var is consulted
        assert main(["experiment", cfg, "--threads", "1",
                     "--validate"]) == 0

    def test_threaded_run_matches_serial(self, tmp_path):
        out1, out2 = tmp_path / "t1", tmp_path / "t2"
        cfg1 = _experiment_config(tmp_path / "e1.toml", out=out1,
                                  mc_reps=2, models='["ex1"]')
        cfg2 = _experiment_config(tmp_path / "e2.toml", out=out2,
                                  mc_reps=2, models='["ex1"]')
        assert main(["experiment", cfg1, "--threads", "2"]) == 0
        assert main(["experiment", cfg2, "--threads", "1"]) == 0
        assert (_read_bytes(out1 / "summary.csv")
                == _read_bytes(out2 / "summary.csv"))


# ---------------------------------------------------------------------------
# toy


class TestToy:
    def test_grid_shape_and_lambda_zero_collapse(self, tmp_path):
        out = tmp_path / "toy.csv"
        cfg = tmp_path / "t.toml"
        cfg.write_text(textwrap.dedent(f"""
            [toy]
            mu_grid = [0.0, 1.5]
            lambda_grid = [0.0, 1.0, 2.0]
            reps = 400
            seed = 2
            out = "{out}"
        """))
        assert main(["toy", str(cfg)]) == 0
        rows = _read_csv(out)
        assert len(rows) == 2 * 3 * 3
        assert {r["method"] for r in rows} == {"mle", "soft", "hard"}
        # with no threshold the three estimators coincide draw for draw
        for mu in ("0", "1.5"):
            cell = {r["method"]: r for r in rows
                    if r["mu_diff"] == mu and float(r["lambda"]) == 0.0}
            assert cell["soft"]["bias"] == cell["mle"]["bias"]
            assert cell["hard"]["bias"] == cell["mle"]["bias"]
            assert cell["soft"]["mse"] == cell["mle"]["mse"]

    def test_stdout_table(self, capsys):
        assert main(["toy", "--reps", "50", "--seed", "1"]) == 0
        text = capsys.readouterr().out
        assert "bias" in text and "mse" in text and "mle" in text

    def test_negative_lambda_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "t.toml"
        cfg.write_text("[toy]\nlambda_grid = [-1.0]\n")
        assert main(["toy", str(cfg)]) == 2
        assert "negative" in capsys.readouterr().err

    def test_rerun_bytes(self, tmp_path):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (out1, out2):
            assert main(["toy", "--reps", "300", "--seed", "5",
                         "--out", str(out)]) == 0
        assert _read_bytes(out1) == _read_bytes(out2)


# ---------------------------------------------------------------------------
# simulate and true-params


class TestSimulate:
    def test_round_trip_matches_library(self, tmp_path):
        out = tmp_path / "sim.csv"
        assert main(["simulate", "--suite", "two_stage_ternary",
                     "--model", "ex5", "--n", "25", "--seed", "13",
                     "--out", str(out)]) == 0
        ds = load_csv(str(out), suite_design("two_stage_ternary"))
        ref = simulate(model_spec("two_stage_ternary", "ex5"), 25, 13)
        assert ds.trajectories == ref.trajectories

    def test_flag_overrides_config_n(self, tmp_path):
        out = tmp_path / "sim.csv"
        cfg = tmp_path / "s.toml"
        cfg.write_text(textwrap.dedent(f"""
            [simulate]
            suite = "two_stage_binary"
            model = "ex1"
            n = 10
            seed = 0
            out = "{out}"
        """))
        assert main(["simulate", str(cfg), "--n", "20"]) == 0
        with open(out) as fh:
            assert sum(1 for _ in fh) == 21

    def test_requires_out(self, capsys):
        assert main(["simulate", "--suite", "two_stage_binary",
                     "--model", "ex1"]) == 2
        assert "out" in capsys.readouterr().err


class TestTrueParams:
    def test_values_match_library(self, tmp_path):
        out = tmp_path / "tp.csv"
        assert main(["true-params", "--suite", "two_stage_binary",
                     "--models", "ex3", "ex5", "--out", str(out)]) == 0
        rows = _read_csv(out)
        design = suite_design("two_stage_binary")
        tg = parse_target("stage1.action.1", design)
        for r in rows:
            want = true_parameter(model_spec("two_stage_binary", r["model"]),
                                  tg.stage, np.asarray(tg.contrast))
            assert float(r["value"]) == want

    def test_defaults_cover_all_models(self, capsys):
        assert main(["true-params", "--suite", "three_stage_binary"]) == 0
        text = capsys.readouterr().out
        for label in MODEL_LABELS:
            assert label in text


# ---------------------------------------------------------------------------
# config handling and entry point


class TestConfigErrors:
    def test_unknown_section(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[nonsense]\nx = 1\n")
        assert main(["toy", str(cfg)]) == 2
        assert "unknown config section" in capsys.readouterr().err

    def test_unknown_key_in_section(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[toy]\nbogus = 1\n")
        assert main(["toy", str(cfg)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["toy", str(tmp_path / "absent.toml")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_malformed_toml(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[toy\n")
        assert main(["toy", str(cfg)]) == 2
        assert "cannot parse" in capsys.readouterr().err

    def test_unknown_design_key(self, behavior_csv, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(textwrap.dedent(f"""
            [fit]
            data = "{behavior_csv}"

            [[fit.design.stages]]
            covariates = 3
            treatments = 2
            main = ["1"]
            interact = ["1"]
            typo = 1
        """))
        assert main(["fit", str(cfg)]) == 2
        assert "design stage 1" in capsys.readouterr().err

    def test_bad_feature_reference(self, behavior_csv, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(textwrap.dedent(f"""
            [fit]
            data = "{behavior_csv}"

            [[fit.design.stages]]
            covariates = 3
            treatments = 2
            main = ["1", "X9_1"]
            interact = ["1"]
        """))
        assert main(["fit", str(cfg)]) == 2
        assert "does not resolve" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = tmp_path / "sim.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "qlaci.cli", "simulate",
         "--suite", "two_stage_binary", "--model", "ex1",
         "--n", "5", "--seed", "1", "--out", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert out.exists()
