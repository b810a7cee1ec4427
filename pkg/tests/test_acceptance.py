"""
End-to-end designs on the shipped FIR and two-tank configurations.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

import artifacts
from appset import EllipsoidPair
from cli import EXIT_OK, cli, compute_hessian, load_config
from cyclic import DESCENT_SLACK, receding_horizon_design
from fisher import batch_information, noise_whitener
from harness import monte_carlo
from lti_core import sensitivity_impulse_responses

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(name):
    config, model, spec = load_config(CONFIGS / name)
    hessian = compute_hessian(model, config, spec)
    return config, model, spec, receding_horizon_design(model, spec, hessian)


@pytest.fixture(scope="module")
def fir_design():
    return run("example1_fir.json")


@pytest.fixture(scope="module")
def two_tank_design():
    started = time.perf_counter()
    design = run("example2_two_tank.json")
    return design, time.perf_counter() - started


def check_design(model, spec, result):
    assert result.succeeded, result.status
    assert result.stop_time <= spec.max_time
    assert result.inputs.shape == (result.stop_time + spec.horizon_nu, model.n_u)
    assert result.margin >= -1e-6
    assert result.stop_conditions_agree
    assert np.abs(result.inputs).max() <= spec.u_max + 1e-9
    assert np.abs(result.outputs).max() <= spec.y_max + 1e-8
    assert np.linalg.eigvalsh(result.slack)[0] >= -1e-8
    assert result.final_j <= spec.tol_j
    for row, raw in zip(result.trace, result.cycle_traces):
        raw = np.asarray(raw)
        rises = np.flatnonzero(np.diff(raw) > DESCENT_SLACK * np.maximum(1.0, raw[:-1]))
        if row.rejected:
            assert rises.tolist() == [raw.size - 2]
            assert row.rejected_J == raw[-1]
            assert row.J == raw[-2]
        else:
            assert rises.size == 0
            assert row.J == raw[-1]
    assert result.rejected_cycles == sum(row.rejected for row in result.trace)


def test_fir_design_meets_the_accuracy_target(fir_design):
    _, model, spec, result = fir_design
    check_design(model, spec, result)
    assert result.stop_time <= 100
    assert result.lmi_ok


def test_fir_final_information_matches_batch(fir_design):
    _, model, spec, result = fir_design
    bank = sensitivity_impulse_responses(model, None, spec.truncation_n)
    batch = batch_information(bank, result.inputs, noise_whitener(model.lam))
    assert np.linalg.norm(result.final_fim - batch) <= 1e-8 * np.linalg.norm(batch)


def test_fir_monte_carlo_coverage(fir_design):
    config, model, spec, result = fir_design
    ellipsoids = EllipsoidPair(result.hessian, result.final_fim, model.theta_g, spec.gamma, spec.alpha)
    block = config.monte_carlo
    report = monte_carlo(model, result.inputs, ellipsoids, block.runs, block.seed, workers=2)
    assert report.flagged_count == 0
    assert 0.88 <= report.inside_id_fraction <= 0.99
    assert report.inside_app_fraction >= report.inside_id_fraction


def test_two_tank_mpc_design(two_tank_design):
    (_, model, spec, result), elapsed = two_tank_design
    check_design(model, spec, result)
    assert elapsed <= 300.0
    assert np.linalg.eigvalsh(result.hessian)[0] >= 0.0


def test_command_line_round_trip(tmp_path):
    runner = CliRunner()
    out = tmp_path / "example1"
    design = runner.invoke(cli, ["design", str(CONFIGS / "example1_fir.json"), "--out", str(out)])
    assert design.exit_code == EXIT_OK, design.output

    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "success"
    assert summary["lmi_satisfied"]
    assert summary["final_j"] <= 1e-12
    assert summary["rejected_cycles"] == len(summary["rejected_j"])
    inputs, outputs = artifacts.read_design_csv(out / "design.csv")
    assert inputs.shape[0] == summary["input_length"]
    assert artifacts.read_matrix_csv(out / "fim.csv").shape == (2, 2)

    validate = runner.invoke(cli, ["validate", str(CONFIGS / "example1_fir.json"), str(out / "design.csv"), "--runs", "20"])
    assert validate.exit_code == EXIT_OK, validate.output
    summary = artifacts.read_summary(out / "summary.json")
    assert summary["validation_runs"] == 20
    assert summary["status"] == "success"
    assert (out / "montecarlo.csv").read_text().count("\n") == 21
