import json

import pandas as pd
import pytest

from mvmrp.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, create_parser, main

QUESTIONS = "party=D,R,I;policy=support,oppose"
FORMULA = "response ~ v_fe(case_id) + choice + (1 | state : choice) + (1 | race : choice)"


@pytest.fixture
def files(temp_dir, survey_frame, cells_frame, copart_frame):
    """Survey, cells and copartisanship files on disk."""
    paths = {"survey": temp_dir / "survey.csv", "cells": temp_dir / "cells.csv", "copart": temp_dir / "copart.csv"}
    survey_frame.to_csv(paths["survey"], index=False)
    cells_frame.to_csv(paths["cells"], index=False)
    copart_frame.to_csv(paths["copart"], index=False)
    return paths


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    return code, json.loads(capsys.readouterr().out)


class TestCheckFormula:
    def test_valid(self, capsys):
        code, result = _run(capsys, ["check-formula", "--formula", "y ~ (1 | h) + x + (1 | g)"])
        assert code == EXIT_OK
        assert result["success"]
        assert result["canonical"] == "y ~ x + (1 | g) + (1 | h)"
        assert result["ast"]["response"] == "y"

    def test_syntax_error(self, capsys):
        code, result = _run(capsys, ["check-formula", "--formula", "y ~ x ++"])
        assert code == EXIT_USAGE
        assert not result["success"]
        assert "at byte 7" in result["message"]


class TestUsage:
    def test_no_subcommand(self, capsys):
        code, result = _run(capsys, [])
        assert code == EXIT_USAGE
        assert "usage" in result

    def test_unknown_flag(self, capsys):
        code, _ = _run(capsys, ["fit", "--frobnicate"])
        assert code == EXIT_USAGE

    def test_missing_required_options(self, capsys):
        code, result = _run(capsys, ["fit", "--formula", FORMULA])
        assert code == EXIT_USAGE
        assert "--questions" in result["message"]
        assert "--data" in result["message"]

    def test_parser_lists_subcommands(self):
        help_text = create_parser().format_help()
        for command in ("check-formula", "fit", "predict", "poststratify", "simulate"):
            assert command in help_text


class TestFitAndPredict:
    """Fit, save, reload and post-stratify through the command line."""

    def test_missing_data_file(self, capsys, temp_dir):
        absent = temp_dir / "absent.csv"
        code, result = _run(capsys, ["fit", "--data", absent, "--questions", QUESTIONS, "--formula", FORMULA,
                                     "--out-dir", temp_dir / "out"])
        assert code == EXIT_DATA
        assert str(absent) in result["message"]

    def test_unknown_variable_is_data_error(self, capsys, files, temp_dir):
        code, result = _run(capsys, ["fit", "--data", files["survey"], "--questions", QUESTIONS,
                                     "--formula", "response ~ choice + (1 | county)", "--out-dir", temp_dir / "out"])
        assert code == EXIT_DATA
        assert "county" in result["message"]

    def test_singular_design_is_numerical_error(self, capsys, temp_dir, survey_frame):
        path = temp_dir / "survey.csv"
        survey_frame.assign(zero=0.0).to_csv(path, index=False)
        code, result = _run(capsys, ["fit", "--data", path, "--questions", QUESTIONS,
                                     "--formula", "response ~ zero", "--out-dir", temp_dir / "out"])
        assert code == EXIT_NUMERICAL
        assert "singular" in result["message"]

    def test_round_trip(self, capsys, files, temp_dir):
        out = temp_dir / "out"
        code, result = _run(capsys, ["fit", "--data", files["survey"], "--questions", QUESTIONS,
                                     "--formula", FORMULA, "--out-dir", out, "--max-iter", "40", "--dump-designs"])
        assert code == EXIT_OK
        assert result["iterations"] <= 40
        for name in ("state.json", "elbo_trace.csv", "coefficients.csv", "designs/X.mtx"):
            assert (out / name).exists()
        trace = pd.read_csv(out / "elbo_trace.csv")
        assert list(trace.columns) == ["iteration", "elbo"]
        assert len(trace) == result["iterations"] + 1

        code, result = _run(capsys, ["predict", "--poststrat", files["cells"], "--questions", QUESTIONS,
                                     "--out-dir", out])
        assert code == EXIT_OK
        assert result["cells"] == 6
        predictions = pd.read_csv(out / "predictions.csv")
        assert len(predictions) == 36
        qoi = json.loads((out / "qoi.json").read_text(encoding="utf-8"))
        assert qoi["geographies"] == ["AA", "BB", "CC"]
        assert set(qoi["quantities"]["marginal:party"]["AA"]) == {"D", "R", "I"}

    def test_predict_missing_state(self, capsys, files, temp_dir):
        code, result = _run(capsys, ["predict", "--poststrat", files["cells"], "--questions", QUESTIONS,
                                     "--out-dir", temp_dir / "nothing"])
        assert code == EXIT_DATA
        assert "state file not found" in result["message"]


class TestPoststratify:
    def test_baseline_from_config(self, capsys, files, temp_dir):
        config = temp_dir / "run.yaml"
        config.write_text(
            "data:\n"
            "  survey: survey.csv\n"
            "  poststrat: cells.csv\n"
            "questions:\n"
            "  party: [D, R, I]\n"
            "  policy: [support, oppose]\n"
            "alt_covariates:\n"
            "  - {path: copart.csv, keys: [state], question: party, columns: [lag_copart]}\n"
            "model:\n"
            f"  formula: \"{FORMULA} + lag_copart\"\n"
            "solver:\n"
            "  max_iter: 30\n",
            encoding="utf-8",
        )
        code, result = _run(capsys, ["poststratify", "--config", config, "--estimator", "naive",
                                     "--out-dir", temp_dir / "naive", "--by", "geography,race"])
        assert code == EXIT_OK
        assert result["cells"] == 6
        qoi = pd.read_csv(temp_dir / "naive" / "qoi.csv")
        assert "AA:w" in set(qoi["geography"])

    def test_zero_padded_state_codes(self, capsys, temp_dir, survey_frame, cells_frame, copart_frame):
        codes = {"AA": "01", "BB": "02", "CC": "06"}
        survey_frame.assign(state=survey_frame["state"].map(codes)).to_csv(temp_dir / "survey.csv", index=False)
        cells_frame.assign(state=cells_frame["state"].map(codes),
                           geography=cells_frame["geography"].map(codes)).to_csv(temp_dir / "cells.csv", index=False)
        copart_frame.assign(state=copart_frame["state"].map(codes)).to_csv(temp_dir / "copart.csv", index=False)
        config = temp_dir / "run.yaml"
        config.write_text(
            "data:\n"
            "  survey: survey.csv\n"
            "  poststrat: cells.csv\n"
            "questions:\n"
            "  party: [D, R, I]\n"
            "  policy: [support, oppose]\n"
            "alt_covariates:\n"
            "  - {path: copart.csv, keys: [state], question: party, columns: [lag_copart]}\n"
            "model:\n"
            f"  formula: \"{FORMULA} + lag_copart\"\n"
            "solver:\n"
            "  max_iter: 30\n",
            encoding="utf-8",
        )
        code, result = _run(capsys, ["poststratify", "--config", config, "--out-dir", temp_dir / "fips"])
        assert code == EXIT_OK, result["message"]
        qoi = json.loads((temp_dir / "fips" / "qoi.json").read_text(encoding="utf-8"))
        assert qoi["geographies"] == ["01", "02", "06"]

    def test_truth_rejected(self, capsys, files, temp_dir):
        code, _ = _run(capsys, ["poststratify", "--data", files["survey"], "--poststrat", files["cells"],
                                "--questions", QUESTIONS, "--formula", FORMULA, "--estimator", "truth",
                                "--out-dir", temp_dir / "out"])
        assert code == EXIT_USAGE


class TestSimulate:
    def _config(self, temp_dir, estimators):
        path = temp_dir / "sim.yaml"
        path.write_text(
            "simulate:\n"
            "  geographies: 3\n"
            "  superpoll_size: 2000\n"
            "  sample_size: 200\n"
            "  replications: 1\n"
            f"  estimators: [{', '.join(estimators)}]\n",
            encoding="utf-8",
        )
        return path

    def test_truth_passthrough(self, capsys, temp_dir):
        code, result = _run(capsys, ["simulate", "--config", self._config(temp_dir, ["truth"]),
                                     "--out-dir", temp_dir / "sim", "--seed", "7"])
        assert code == EXIT_OK
        assert result["failures"] == {}
        records = pd.read_csv(temp_dir / "sim" / "mae.csv")
        assert (records["mae"] == 0.0).all()

    def test_generator_flags(self, capsys, temp_dir):
        code, result = _run(capsys, ["simulate", "--config", self._config(temp_dir, ["truth"]),
                                     "--out-dir", temp_dir / "sim", "--sampling-bias", "0.5",
                                     "--independent-questions"])
        assert code == EXIT_OK
        assert result["unconverged"] == {}

    def test_jobs_do_not_change_tables(self, capsys, temp_dir):
        config = self._config(temp_dir, ["mvmrp", "naive"])
        for jobs in (1, 4):
            code, _ = _run(capsys, ["simulate", "--config", config, "--out-dir", temp_dir / f"jobs{jobs}",
                                    "--seed", "5", "--replications", "3", "--max-iter", "30", "--jobs", jobs])
            assert code == EXIT_OK
        for name in ("mae.csv", "mae_summary.csv"):
            assert (temp_dir / "jobs1" / name).read_bytes() == (temp_dir / "jobs4" / name).read_bytes()

    def test_unknown_run(self, capsys, temp_dir):
        code, result = _run(capsys, ["simulate", "--config", self._config(temp_dir, ["lasso"]),
                                     "--out-dir", temp_dir / "sim"])
        assert code == EXIT_USAGE
        assert "lasso" in result["message"]
