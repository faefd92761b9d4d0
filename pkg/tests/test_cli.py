import filecmp
import json
import shutil

import numpy as np
import pandas as pd
import pytest
from scipy.stats import norm

from corrstress import cli
from corrstress.exceptions import CalibrationError, IngestError, NumericalError, ValidationError

from conftest import FIXTURE_DIR


def fixture_copy(tmp_path, **config):
    d = tmp_path / "fx"
    shutil.copytree(FIXTURE_DIR, d)
    cfg = json.loads((d / "config.json").read_text())
    cfg.update(config)
    (d / "config.json").write_text(json.dumps(cfg))
    return d


@pytest.fixture(scope="module")
def completed(tmp_path_factory):
    d = fixture_copy(tmp_path_factory.mktemp("run"), mc_samples=20000)
    assert cli.main(["run", "--config", str(d / "config.json")]) == 0
    return d


def test_run_writes_every_artifact(completed):
    out = completed / "out"
    for name in ("params.csv", "pip_history.csv", "nig_params.json", "nig_fit.json", "stress_mc.json",
                 "stress_historical.json", "var_report.csv", "var_series.csv", "params_timeseries.svg",
                 "heatmaps.svg", "var_series.svg"):
        assert (out / name).is_file(), name
    assert not (out / cli.FAILURE_MARKER).exists()
    assert list((out / "assignments").glob("assignment_*.json"))
    mc = json.loads((out / "stress_mc.json").read_text())
    hist = json.loads((out / "stress_historical.json").read_text())
    assert mc["in_region"] and hist["in_region"]
    assert mc["var"] >= hist["var"]


def test_params_csv_layout(completed):
    frame = pd.read_csv(completed / "out" / "params.csv")
    assert list(frame.columns) == ["date", "eta", "lambda_MM-Americas", "lambda_Financials",
                                   "nu_MM-Americas", "nu_Financials"]
    assert pd.to_datetime(frame["date"]).is_monotonic_increasing


def test_rerun_byte_identical(tmp_path):
    d = fixture_copy(tmp_path, mc_samples=2000)
    cfg = str(d / "config.json")
    assert cli.main(["run", "--config", cfg, "--out", str(d / "a")]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(d / "b")]) == 0
    cmp = filecmp.dircmp(d / "a", d / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files


def test_invalid_q_rejected_before_work(tmp_path, capsys):
    d = fixture_copy(tmp_path, hdr_q=1.5)
    assert cli.main(["run", "--config", str(d / "config.json")]) == cli.EXIT_VALIDATION
    assert "hdr_q" in capsys.readouterr().err
    assert not (d / "out").exists()
    d2 = fixture_copy(tmp_path / "b")
    assert cli.main(["reverse-stress", "--config", str(d2 / "config.json"), "--q", "0"]) == cli.EXIT_VALIDATION


def test_unknown_config_key(tmp_path):
    d = fixture_copy(tmp_path, hdr_level=0.05)
    assert cli.main(["run", "--config", str(d / "config.json")]) == cli.EXIT_VALIDATION


def test_missing_prices_marks_ingest(tmp_path):
    d = fixture_copy(tmp_path)
    (d / "prices.csv").unlink()
    assert cli.main(["calibrate", "--config", str(d / "config.json")]) == cli.EXIT_IO
    assert "stage: ingest" in (d / "out" / cli.FAILURE_MARKER).read_text()


def test_marker_removed_after_success(tmp_path):
    d = fixture_copy(tmp_path)
    (d / "out").mkdir()
    (d / "out" / cli.FAILURE_MARKER).write_text("stage: old\n")
    assert cli.main(["select-factors", "--config", str(d / "config.json")]) == 0
    assert not (d / "out" / cli.FAILURE_MARKER).exists()
    assert (d / "out" / "pip_history.csv").is_file()


def test_exit_code_mapping():
    assert cli._exit_code(IngestError("x")) == cli.EXIT_IO
    assert cli._exit_code(FileNotFoundError("x")) == cli.EXIT_IO
    assert cli._exit_code(ValidationError("x")) == cli.EXIT_VALIDATION
    assert cli._exit_code(NumericalError("x")) == cli.EXIT_NUMERICAL
    assert cli._exit_code(CalibrationError("x", pruned=())) == cli.EXIT_NUMERICAL


def _stress(tmp_path, scenario_text, suffix=".csv"):
    d = fixture_copy(tmp_path)
    scen = d / f"scenario{suffix}"
    scen.write_text(scenario_text)
    code = cli.main(["stress", "--config", str(d / "config.json"), "--scenario", str(scen)])
    return d, code


@pytest.fixture(scope="module")
def stress_report(tmp_path_factory):
    csv_text = (
        "eta,lambda_MM-Americas,lambda_Financials,nu_MM-Americas,nu_Financials,label\n"
        "0,0,0,0,0,zero\n"
        ",,,0.1,,nu_up\n"
        "30,,,,,comonotone\n"
    )
    d, code = _stress(tmp_path_factory.mktemp("stress"), csv_text)
    assert code == 0
    return d, pd.read_csv(d / "out" / "stress_report.csv").set_index("label")


def test_zero_shift_no_change(stress_report):
    _, rep = stress_report
    assert rep.loc["zero", "delta_var"] == 0.0
    assert rep.loc["zero", "var_stressed"] == rep.loc["zero", "var_base"]


def test_positive_intra_shift_raises_var(stress_report):
    _, rep = stress_report
    assert rep.loc["nu_up", "delta_var"] > 0


def test_comonotone_scenario_matches_bound(stress_report):
    d, rep = stress_report
    cfg = json.loads((d / "config.json").read_text())
    prices = pd.read_csv(d / "prices.csv", index_col="date", parse_dates=True)
    assets = json.loads((d / "manifest.json").read_text())["assets"]
    r = np.log(prices[list(assets)]).diff().iloc[1:]
    date = pd.Timestamp(rep.loc["comonotone", "date"])
    vol = r[r.index < date].iloc[-cfg["window"]:].std(ddof=1).to_numpy()
    w = np.full(len(assets), 1 / len(assets))
    bound = -norm.ppf(1 - cfg["var_alpha"]) * cfg["portfolio"]["value"] * np.dot(w, vol)
    assert rep.loc["comonotone", "var_stressed"] == pytest.approx(bound, rel=1e-6)


def test_unknown_factor_in_scenario(tmp_path, capsys):
    _, code = _stress(tmp_path, json.dumps({"label": "x", "shifts": {"nu_Mars": 0.1}}), ".json")
    assert code == cli.EXIT_VALIDATION
    assert "nu_Mars" in capsys.readouterr().err


def test_config_paths_relative_to_file(tmp_path):
    d = fixture_copy(tmp_path)
    cfg = cli.RunConfig.from_file(d / "config.json", {"seed": 3})
    assert cfg.prices == d / "prices.csv" and cfg.seed == 3
    with pytest.raises(ValidationError):
        cli.RunConfig(prices=d, manifest=d, output_dir=d, seed=-1)
