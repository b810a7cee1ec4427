"""
Command-line surface: configuration errors, exit codes and artifact files.
"""

from __future__ import annotations

import json

import numpy as np
import pytest
from click.testing import CliRunner

import artifacts
from cli import EXIT_CONFIG, EXIT_OK, cli

FIR_MODEL = {"schema_version": 1, "name": "fir2", "structure": "fir", "order": 2, "theta": [10.0, -9.0], "lambda": 1.0}


def write_config(directory, experiment=None, monte_carlo=None, model=FIR_MODEL, model_name="model.json"):
    if model is not None:
        (directory / model_name).write_text(json.dumps(model, indent=2))
    block = {"gamma": 100.0, "u_max": 0.5, "y_max": 5.0, "horizon_nu": 5, "truncation_n": 3, "max_time": 100}
    block.update(experiment or {})
    config = {
        "schema_version": 1,
        "model": model_name,
        "experiment": block,
        "vapp": {"scenario": "open_loop_step", "length": 50, "reference": 0.1},
        "monte_carlo": {"runs": 20, "seed": 5, **(monte_carlo or {})},
    }
    path = directory / "run.json"
    path.write_text(json.dumps(config, indent=2))
    return path


def write_random_design(path, length=40, n_u=1, seed=0):
    inputs = np.random.default_rng(seed).uniform(-0.5, 0.5, (length, n_u))
    artifacts.write_design_csv(path, inputs, np.zeros((length, 1)))
    return path


@pytest.fixture
def runner():
    return CliRunner()


def test_schema_lists_both_documents(runner):
    result = runner.invoke(cli, ["schema"])
    assert result.exit_code == EXIT_OK
    schemas = json.loads(result.output)
    assert set(schemas) == {"RunConfig", "ModelDocument"}
    assert "lambda" in schemas["ModelDocument"]["properties"]


def test_missing_model_file_is_a_config_error(runner, tmp_path):
    config = write_config(tmp_path, model=None)
    out = tmp_path / "out"
    result = runner.invoke(cli, ["design", str(config), "--out", str(out)])
    assert result.exit_code == EXIT_CONFIG
    assert "file not found" in result.output
    assert not out.exists()


def test_invalid_gamma_points_at_its_line(runner, tmp_path):
    config = write_config(tmp_path, experiment={"gamma": -1.0})
    line = next(i for i, text in enumerate(config.read_text().splitlines(), 1) if '"gamma"' in text)
    result = runner.invoke(cli, ["design", str(config), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG
    assert f"{config}:{line}: experiment.gamma" in result.output


def test_distinct_output_horizon_is_rejected(runner, tmp_path):
    config = write_config(tmp_path, experiment={"horizon_ny": 7})
    result = runner.invoke(cli, ["design", str(config), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG
    assert "horizon_ny" in result.output


def test_short_truncation_is_a_config_error(runner, tmp_path):
    model = {
        "structure": "state_space",
        "a": [["theta3", "theta4"], [1.0, 0.0]],
        "b": [[4.5], [0.0]],
        "c": [["theta1", "theta2"]],
        "theta": [0.12, 0.059, 0.74, -0.14],
        "lambda": 0.01,
    }
    config = write_config(tmp_path, experiment={"truncation_n": 3}, model=model)
    result = runner.invoke(cli, ["design", str(config), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG
    assert "truncation_n >=" in result.output


def test_tiny_gamma_design_needs_only_the_horizon(runner, tmp_path):
    config = write_config(tmp_path, experiment={"gamma": 1e-9})
    out = tmp_path / "out"
    result = runner.invoke(cli, ["design", str(config), "--out", str(out)])
    assert result.exit_code == EXIT_OK, result.output
    inputs, outputs = artifacts.read_design_csv(out / "design.csv")
    assert inputs.shape == (6, 1)
    assert not inputs.any()
    summary = artifacts.read_summary(out / "summary.json")
    assert summary["status"] == "success"
    assert summary["stop_time"] == 1
    for name in ("trace.csv", "fim.csv", "hessian.csv", "ellipsoids.csv"):
        assert (out / name).is_file()


def test_design_csv_parses_back_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    inputs, outputs = rng.standard_normal((25, 2)), rng.standard_normal((25, 3)) * 1e-7
    path = artifacts.write_design_csv(tmp_path / "design.csv", inputs, outputs)
    read_inputs, read_outputs = artifacts.read_design_csv(path)
    np.testing.assert_array_equal(read_inputs, inputs)
    np.testing.assert_array_equal(read_outputs, outputs)


def test_summary_updates_merge(tmp_path):
    path = tmp_path / "summary.json"
    artifacts.update_summary(path, status="success", margin=np.float64(0.5))
    artifacts.update_summary(path, runs=3, eigenvalues=np.array([1.0, 2.0]))
    assert artifacts.read_summary(path) == {"status": "success", "margin": 0.5, "runs": 3, "eigenvalues": [1.0, 2.0]}


def test_validate_with_zero_runs(runner, tmp_path):
    config = write_config(tmp_path)
    design = write_random_design(tmp_path / "design.csv")
    result = runner.invoke(cli, ["validate", str(config), str(design), "--runs", "0"])
    assert result.exit_code == EXIT_OK, result.output
    lines = (tmp_path / "montecarlo.csv").read_text().splitlines()
    assert lines == ["run,seed,theta1,theta2,in_si,in_app,flagged"]
    assert artifacts.read_summary(tmp_path / "summary.json")["validation_runs"] == 0


def test_validate_noiseless_override_covers_every_run(runner, tmp_path):
    config = write_config(tmp_path, monte_carlo={"lambda_override": 0.0})
    design = write_random_design(tmp_path / "design.csv")
    out = tmp_path / "report"
    result = runner.invoke(cli, ["validate", str(config), str(design), "--out", str(out), "--runs", "4"])
    assert result.exit_code == EXIT_OK, result.output
    summary = artifacts.read_summary(out / "summary.json")
    assert summary["inside_id_fraction"] == 1.0
    assert summary["inside_app_fraction"] == 1.0
    assert len(summary["validation_seeds"]) == 4


def test_validate_rejects_mismatched_design(runner, tmp_path):
    config = write_config(tmp_path)
    design = write_random_design(tmp_path / "design.csv", n_u=2)
    result = runner.invoke(cli, ["validate", str(config), str(design)])
    assert result.exit_code == EXIT_CONFIG
    assert "model expects 1 / 1" in result.output
    assert not (tmp_path / "montecarlo.csv").exists()


def test_horizon_shorter_than_parameter_count_is_a_config_error(runner, tmp_path):
    model = {"structure": "fir", "order": 3, "theta": [1.0, 0.5, 0.25], "lambda": 1.0}
    config = write_config(tmp_path, experiment={"horizon_nu": 1, "truncation_n": 4}, model=model)
    result = runner.invoke(cli, ["design", str(config), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG
    assert "fewer than the 3 parameters" in result.output


@pytest.mark.parametrize("command", ["design", "validate"])
def test_negative_seed_is_rejected_before_running(runner, tmp_path, command):
    config = write_config(tmp_path)
    args = [command, str(config)]
    if command == "validate":
        args.append(str(write_random_design(tmp_path / "design.csv")))
    result = runner.invoke(cli, args + ["--seed", "-1"])
    assert result.exit_code == EXIT_CONFIG
    assert "--seed" in result.output
    assert not (tmp_path / "montecarlo.csv").exists()
