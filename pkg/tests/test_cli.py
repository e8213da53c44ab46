import io
import json
from pathlib import Path
from typing import Self

import numpy as np
import pandas as pd
import pytest

from fewtreat import cli
from fewtreat.confidence import uniform_band
from fewtreat.design import build_scheme
from fewtreat.estimator import control_residuals, point_estimate
from fewtreat.exception_handlers import (
    EXIT_INVARIANT_VIOLATION,
    EXIT_OK,
    EXIT_USER_ERROR,
    InvariantViolation,
)
from fewtreat.hetero import HeteroSpec, fit, normalize
from fewtreat.montecarlo import DgpConfig
from fewtreat.panel import load_panel, write_panel
from fewtreat.resample import draw
from fewtreat.util import fingerprint
from tests.conftest import BaseGiven


class CaseGiven(BaseGiven):
    def panel_csv(self, directory: Path) -> Path:
        path = directory / "panel.csv"
        write_panel(self.object, path)
        self.data["csv"] = path
        return path

    def json_file(self, directory: Path, name: str, payload: dict) -> Path:
        path = directory / name
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    def with_random_panel(self) -> Self:
        self.random_panel(treat_times=(2, 3), n_control=8, n_periods=5, seed=3)
        return self


class CaseWhen:
    def __init__(self, capsys):
        self.capsys = capsys

    def run(self, *argv: str) -> tuple[int, str, str]:
        code = cli.run([str(a) for a in argv])
        captured = self.capsys.readouterr()
        return code, captured.out, captured.err


@pytest.fixture
def case_given() -> CaseGiven:
    return CaseGiven()


@pytest.fixture
def when(capsys) -> CaseWhen:
    return CaseWhen(capsys)


def test_estimate_csv(when: CaseWhen, example_csv):
    code, out, _ = when.run("estimate", "--input", example_csv)

    assert code == EXIT_OK
    frame = pd.read_csv(io.StringIO(out))
    assert list(frame.columns) == ["label", "estimate", "seed", "config_fingerprint"]
    assert frame["label"].tolist() == ["att"]
    assert frame["estimate"].tolist() == [2.0]
    assert frame["seed"].tolist() == [0]


def test_infer_is_byte_identical_on_rerun(when: CaseWhen, case_given: CaseGiven, tmp_path):
    csv = case_given.with_random_panel().panel_csv(tmp_path)
    first, second = tmp_path / "first.json", tmp_path / "second.json"
    args = ["infer", "--input", csv, "--scheme", "event_study", "--B", 500, "--seed", 7]

    assert when.run(*args, "--format", "json", "--output", first)[0] == EXIT_OK
    assert when.run(*args, "--format", "json", "--output", second)[0] == EXIT_OK

    assert first.read_bytes() == second.read_bytes()


def test_infer_matches_library(when: CaseWhen, case_given: CaseGiven, tmp_path):
    csv = case_given.with_random_panel().panel_csv(tmp_path)

    code, out, _ = when.run(
        "infer", "--input", csv, "--scheme", "event_study", "--B", 500, "--seed", 7,
        "--alpha", 0.1, "--normalizer", "constant",
    )

    panel = load_panel(csv)
    scheme = build_scheme("event_study", panel)
    residuals = control_residuals(panel, scheme)
    fitted = fit(HeteroSpec(), residuals, panel)
    draws = draw(normalize(residuals, fitted, panel), fitted, panel, 500, 7)
    band = uniform_band(point_estimate(panel, scheme), draws, 0.1, "constant")

    assert code == EXIT_OK
    frame = pd.read_csv(io.StringIO(out), dtype={"label": str})
    assert frame["label"].tolist() == list(band.labels)
    np.testing.assert_allclose(frame["lower"], band.lower, rtol=1e-12)
    np.testing.assert_allclose(frame["upper"], band.upper, rtol=1e-12)
    assert frame["seed"].unique().tolist() == [7]


def test_json_embeds_seed_and_fingerprint(when: CaseWhen, case_given: CaseGiven, tmp_path):
    csv = case_given.with_random_panel().panel_csv(tmp_path)

    code, out, _ = when.run("infer", "--input", csv, "--B", 100, "--seed", 3, "--format", "json")

    payload = json.loads(out)
    assert code == EXIT_OK
    assert payload["seed"] == 3
    assert payload["config"]["B"] == 100
    assert payload["config_fingerprint"] == fingerprint(payload["config"])
    assert payload["band"]["n_draws"] == 100
    assert len(payload["config"]["input_sha256"]) == 64


def test_markdown_report(when: CaseWhen, case_given: CaseGiven, tmp_path):
    csv = case_given.with_random_panel().panel_csv(tmp_path)

    code, out, _ = when.run(
        "infer", "--input", csv, "--scheme", "event_study", "--B", 200, "--seed", 9,
        "--format", "md",
    )

    assert code == EXIT_OK
    assert "| label | estimate | lower | upper |" in out
    assert "seed `9`" in out
    assert out.startswith("# 95% confidence band")


def test_export_draws(when: CaseWhen, case_given: CaseGiven, tmp_path):
    csv = case_given.with_random_panel().panel_csv(tmp_path)
    exported = tmp_path / "draws.csv"

    code, _, _ = when.run(
        "infer", "--input", csv, "--scheme", "event_study", "--B", 150,
        "--export-draws", exported,
    )

    assert code == EXIT_OK
    frame = pd.read_csv(exported)
    assert len(frame) == 150
    assert list(frame.columns) == ["1", "2", "3", "seed", "config_fingerprint"]


def test_config_file_is_overridden_by_flags(when: CaseWhen, case_given: CaseGiven, tmp_path):
    csv = case_given.with_random_panel().panel_csv(tmp_path)
    config = case_given.json_file(
        tmp_path, "run.json", {"scheme": "event_study", "alpha": 0.1, "B": 100}
    )

    code, out, _ = when.run(
        "infer", "--config", config, "--input", csv, "--scheme", "att", "--format", "json"
    )

    payload = json.loads(out)
    assert code == EXIT_OK
    assert payload["config"]["scheme"] == "att"
    assert payload["config"]["alpha"] == 0.1
    assert payload["band"]["n_draws"] == 100


@pytest.mark.parametrize(
    "argv",
    [
        ["estimate", "--input", "does-not-exist.csv"],
        ["estimate"],
        ["estimate", "--input", "x.csv", "--scheme", "twfe"],
        ["estimate", "--input", "x.csv", "--scheme", "generic"],
        ["infer", "--input", "x.csv", "--scheme", "pretrends", "--hetero", "repeated_cs"],
        ["coverage", "--input", "dgp.json", "--replications", "10"],
        ["estimate", "--input", "x.csv", "--export-draws", "d.csv"],
        ["frobnicate"],
    ],
)
def test_user_errors_exit_with_one(when: CaseWhen, argv):
    code, out, err = when.run(*argv)

    assert code == EXIT_USER_ERROR
    assert out == ""
    assert "error:" in err


def test_too_few_draws_is_a_user_error(when: CaseWhen, example_csv):
    code, _, err = when.run("infer", "--input", example_csv, "--B", 10)

    assert code == EXIT_USER_ERROR
    assert "too few" in err


def test_invariant_violation_exits_with_two(when: CaseWhen, example_csv, monkeypatch):
    def broken(*args, **kwargs):
        raise InvariantViolation("rows of B_j A_j do not sum to zero")

    monkeypatch.setattr("fewtreat.cli.point_estimate", broken)

    code, out, err = when.run("estimate", "--input", example_csv)

    assert code == EXIT_INVARIANT_VIOLATION
    assert out == ""
    assert "internal error" in err


def test_simulate_writes_a_loadable_panel(when: CaseWhen, case_given: CaseGiven, tmp_path):
    config = case_given.json_file(
        tmp_path, "dgp.json", DgpConfig.homoskedastic(n_control=6).model_dump(mode="json")
    )
    output = tmp_path / "simulated.csv"

    code, _, _ = when.run("simulate", "--input", config, "--seed", 4, "--output", output)

    assert code == EXIT_OK
    panel = load_panel(output)
    assert panel.n_treated == 1
    assert panel.n_control == 6
    assert panel.n_periods == 8
    assert pd.read_csv(output)["seed"].unique().tolist() == [4]


def test_simulate_is_csv_only(when: CaseWhen, case_given: CaseGiven, tmp_path):
    config = case_given.json_file(
        tmp_path, "dgp.json", DgpConfig.noiseless().model_dump(mode="json")
    )

    code, _, _ = when.run("simulate", "--input", config, "--format", "json")

    assert code == EXIT_USER_ERROR


def test_coverage_command(when: CaseWhen, case_given: CaseGiven, tmp_path):
    config = case_given.json_file(
        tmp_path, "dgp.json", DgpConfig.noiseless(seed=2).model_dump(mode="json")
    )

    code, out, _ = when.run(
        "coverage", "--input", config, "--replications", 100, "--B", 20, "--format", "json"
    )

    payload = json.loads(out)
    assert code == EXIT_OK
    assert payload["seed"] == 2
    assert payload["report"]["coverage"] == [1.0]
    assert payload["report"]["replications"] == 100


def test_output_location_does_not_change_the_artifact(
    when: CaseWhen, case_given: CaseGiven, tmp_path
):
    csv = case_given.with_random_panel().panel_csv(tmp_path)
    args = ["infer", "--input", csv, "--scheme", "event_study", "--B", 300, "--seed", 5]

    _, out, _ = when.run(*args, "--format", "json")
    when.run(
        *args, "--format", "json", "--output", tmp_path / "band.json",
        "--export-draws", tmp_path / "draws.csv",
    )

    assert (tmp_path / "band.json").read_text(encoding="utf-8") == out
    assert "output" not in json.loads(out)["config"]
    assert "export_draws" not in json.loads(out)["config"]


def test_panel_agg_on_simulated_panel(when: CaseWhen, case_given: CaseGiven, tmp_path):
    config = case_given.json_file(
        tmp_path,
        "dgp.json",
        DgpConfig.heteroskedastic_panel(n_control=30, seed=1).model_dump(mode="json"),
    )
    panel_csv = tmp_path / "simulated.csv"
    simulated, _, _ = when.run(
        "simulate", "--input", config, "--seed", 2, "--output", panel_csv
    )
    assert simulated == EXIT_OK

    code, out, err = when.run(
        "infer", "--input", panel_csv, "--scheme", "event_study", "--hetero", "panel_agg",
        "--alpha", 0.05, "--B", 1000, "--seed", 7, "--format", "json",
    )

    assert code == EXIT_OK, err
    payload = json.loads(out)
    assert payload["hetero"]["kind"] == "panel_agg"
    assert [row["label"] for row in payload["band"]["rows"]] == ["1", "2", "3", "4"]


def test_coverage_defaults_to_the_json_report(
    when: CaseWhen, case_given: CaseGiven, tmp_path
):
    config = case_given.json_file(
        tmp_path, "dgp.json", DgpConfig.noiseless(seed=2).model_dump(mode="json")
    )

    code, out, _ = when.run("coverage", "--input", config, "--replications", 100, "--B", 20)

    payload = json.loads(out)
    assert code == EXIT_OK
    assert payload["config"]["format"] == "json"
    assert payload["report"]["coverage"] == [1.0]
    assert payload["report"]["coverage_se"] == [0.0]
