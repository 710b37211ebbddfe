import math
from pathlib import Path

import pytest

from sdvi import cli, crud
from sdvi.config import build_config


def _fit(settings, tmp_path: Path, name: str, **changes):
    config = build_config({**settings, **changes, "output_dir": str(tmp_path / name)})
    return cli.cmd_fit(config), tmp_path / name


def test_bad_model_choice_is_a_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        cli.build_parser().parse_args(["fit", "--model", "nope", "--seed", "0"])
    assert excinfo.value.code == 2


def test_missing_seed_exits_with_configuration_code(capsys):
    assert cli.main(["fit", "--model", "fig1"]) == cli.EXIT_CONFIG
    assert "seed" in capsys.readouterr().err


def test_discover_writes_the_report(runs_dir):
    run, report = cli.cmd_discover(build_config({"model": "fig1", "seed": 0, "discovery_sims": 200}))
    assert run["status"] == "discovered"
    assert len(report["slps"]) == 2
    assert [slp["summary"] for slp in report["slps"]] == ["x[0] z1[0]", "x[0] z2[0]"]
    assert (runs_dir / run["id"] / crud.DISCOVERY_FILE).exists()
    assert report["d_min"] < 0.0


def test_fit_writes_weights_that_sum_to_one(small_fit, tmp_path):
    summary, directory = _fit(small_fit, tmp_path, "fit")
    result = crud.get_result(directory)
    assert sum(result["weights"]) == pytest.approx(1.0)
    assert math.isfinite(result["global_elbo"])
    assert summary["global_elbo"] == result["global_elbo"]
    assert len(summary["slps"]) == 2
    assert crud.get_run_record(directory)["status"] == "fitted"
    assert crud.get_ledger(directory)
    assert (directory / crud.POSTERIOR_FILE).exists()
    assert (directory / crud.TRAIN_METRICS_FILE).exists()


def test_eval_reports_oracle_metrics_and_unavailable_ones(small_fit, tmp_path):
    _, directory = _fit(small_fit, tmp_path, "fit")
    metrics = cli.cmd_eval(directory, xlsx=True)
    assert metrics["weights_squared_error"] is not None
    assert metrics["elbo_gap"] == pytest.approx(metrics["log_z"] - metrics["global_elbo"])
    assert metrics["lppd"] is None
    assert "lppd" in metrics["unavailable"]
    assert (directory / crud.REPORT_FILE).exists()
    rows = {row["metric"]: row["value"] for row in crud.get_eval(directory)}
    assert rows["lppd"] == "unavailable"
    assert crud.get_run_record(directory)["status"] == "evaluated"


def test_eval_of_a_directory_without_a_run(tmp_path):
    from sdvi.errors import ConfigurationError
    with pytest.raises(ConfigurationError):
        cli.cmd_eval(tmp_path)


def test_bbvi_fit_and_eval(small_fit, tmp_path):
    summary, directory = _fit(small_fit, tmp_path, "bbvi", algorithm="bbvi", bbvi_iters=50)
    assert summary["slps"] == []
    assert crud.get_bbvi(directory)["slp_mass"]
    metrics = cli.cmd_eval(directory)
    assert metrics["global_elbo"] == pytest.approx(summary["global_elbo"])
    assert "weights_squared_error" in metrics["unavailable"]


def test_online_fit(small_fit, tmp_path):
    _, directory = _fit(small_fit, tmp_path, "online", algorithm="sdvi-online", max_runs=2)
    result = crud.get_result(directory)
    assert result["diagnostics"]["runs"] == 2
    assert [slp["index"] for slp in result["slps"]] == [0, 1]
    assert sum(result["weights"]) == pytest.approx(1.0)


def test_same_seed_gives_the_same_fit(small_fit, tmp_path):
    _fit(small_fit, tmp_path, "first")
    _fit(small_fit, tmp_path, "second")
    _fit(small_fit, tmp_path, "threaded", workers=2)
    weights = [crud.get_result(tmp_path / name)["weights"] for name in ("first", "second", "threaded")]
    assert weights[0] == weights[1] == weights[2]


def test_main_fit_returns_zero(tmp_path, capsys):
    code = cli.main([
        "fit", "--model", "fig1", "--seed", "1", "--budget", "100", "--discovery-sims", "200",
        "--output-dir", str(tmp_path / "main"),
    ])
    assert code == cli.EXIT_OK
    assert "global_elbo" in capsys.readouterr().out
