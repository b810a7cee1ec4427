#!/usr/bin/env python3
"""
Command-line front end for the applications-oriented input designer.

Usage:
    python cli.py design configs/example1_fir.json
    python cli.py validate configs/example1_fir.json runs/example1_fir/design.csv --runs 100
    python cli.py schema

Exit codes: 0 success, 2 configuration error, 3 design did not terminate.
"""

import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

import artifacts
from appset import EllipsoidPair, ExperimentSpec, HessianError, application_hessian
from cyclic import QpInfeasible, receding_horizon_design
from fisher import batch_information, noise_whitener
from harness import MpcScenario, monte_carlo
from lti_core import ModelError, SimulationDivergence, TruncationError, model_from_document, sensitivity_impulse_responses
from models import ModelDocument, RunConfig, VappScenario, schemas

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DESIGN = 3


class ConfigError(Exception):
    pass


def _workers():
    return max(1, int(os.getenv("INPUT_DESIGN_WORKERS", "4")))


def _line_of(text, loc):
    """Line of the innermost key of a pydantic error location that appears in the text."""
    position = 0
    for key in loc:
        if not isinstance(key, str):
            continue
        found = text.find(f'"{key}"', position)
        if found < 0:
            break
        position = found
    return text.count("\n", 0, position) + 1


def _describe(path, text, exc):
    lines = []
    for error in exc.errors():
        if error["type"] == "json_invalid":
            lines.append(f"{path}: invalid JSON ({error['msg']})")
            continue
        where = ".".join(str(part) for part in error["loc"]) or "<document>"
        lines.append(f"{path}:{_line_of(text, error['loc'])}: {where}: {error['msg']}")
    return "\n".join(lines)


def _validated(document_class, path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: file not found")
    text = path.read_text()
    try:
        return document_class.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(_describe(path, text, exc)) from exc


def load_config(config_path):
    """
    Load the run configuration and the model it references.
    Returns (config, model, spec). Raises ConfigError with file:line anchored messages.
    """
    config = _validated(RunConfig, config_path)
    document = _validated(ModelDocument, config.resolve_model_path(config_path))
    try:
        model = model_from_document(document)
        spec = ExperimentSpec.from_block(config.experiment)
    except (ModelError, ValueError) as exc:
        raise ConfigError(f"{config.resolve_model_path(config_path)}: {exc}") from exc
    return config, model, spec


def output_directory(config_path, config, out):
    if out:
        return Path(out)
    if config.output_dir:
        return Path(config.output_dir)
    return Path(os.getenv("INPUT_DESIGN_OUT_DIR", "runs")) / Path(config_path).stem


def compute_hessian(model, config, spec):
    vapp = config.vapp
    controller = None
    if vapp.scenario == VappScenario.MPC:
        controller = MpcScenario(model, vapp, spec.u_max, spec.y_max)
    return application_hessian(model, None, controller, vapp.reference, vapp.length, workers=_workers())


def run_design(config_path, out=None, seed=None):
    """Design an input for the configured experiment and write its artifacts. Returns an exit code."""
    try:
        config, model, spec = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"❌ {exc}", err=True)
        return EXIT_CONFIG
    if seed is not None:
        spec = replace(spec, u_init_seed=seed)

    out_dir = output_directory(config_path, config, out)
    click.echo(f"🚀 Designing input for {model.name or Path(config_path).stem}")
    click.echo(f"   gamma={spec.gamma:g}  alpha={spec.alpha:g}  N_u={spec.horizon_nu}  n={spec.truncation_n}")

    try:
        hessian = compute_hessian(model, config, spec)
        result = receding_horizon_design(model, spec, hessian)
    except TruncationError as exc:
        click.echo(f"❌ {exc}", err=True)
        return EXIT_CONFIG
    except (HessianError, SimulationDivergence, QpInfeasible) as exc:
        click.echo(f"❌ Design failed: {exc}", err=True)
        logger.error(f"Design failed for {config_path}: {exc}")
        return EXIT_DESIGN
    except ValueError as exc:
        # horizon too short for the parameter count, bad Hessian shape
        click.echo(f"❌ {config_path}: {exc}", err=True)
        return EXIT_CONFIG
    except Exception as exc:
        logger.error(f"Unexpected failure designing {config_path}: {exc}", exc_info=True)
        click.echo(f"❌ Design failed: {exc}", err=True)
        return EXIT_DESIGN

    ellipsoids = EllipsoidPair(hessian, result.final_fim, model.theta_g, spec.gamma, spec.alpha)
    artifacts.write_design_csv(out_dir / "design.csv", result.inputs, result.outputs)
    artifacts.write_trace_csv(out_dir / "trace.csv", result.trace)
    artifacts.write_matrix_csv(out_dir / "fim.csv", result.final_fim)
    artifacts.write_matrix_csv(out_dir / "hessian.csv", hessian)
    artifacts.write_ellipsoids_csv(out_dir / "ellipsoids.csv", ellipsoids)
    artifacts.update_summary(
        out_dir / "summary.json",
        config=str(config_path),
        status=result.status,
        stop_time=result.stop_time,
        input_length=int(result.inputs.shape[0]),
        final_j=result.final_j,
        lmi_margin=result.margin,
        lmi_satisfied=result.lmi_ok,
        stop_conditions_agree=result.stop_conditions_agree,
        slack_eigenvalues=np.linalg.eigvalsh(result.slack),
        max_abs_input=float(np.abs(result.inputs).max(initial=0.0)),
        max_abs_output=float(np.abs(result.outputs).max(initial=0.0)),
        inner_iterations=int(sum(row.inner_iterations for row in result.trace)),
        rejected_cycles=int(result.rejected_cycles),
        rejected_j=[row.rejected_J for row in result.trace if row.rejected],
        hessian_eigenvalues=np.linalg.eigvalsh(hessian),
    )

    if not result.succeeded:
        click.echo(f"💥 No termination within max_time={spec.max_time}; partial artifacts in {out_dir}", err=True)
        click.echo("   Lower gamma or raise max_time and try again.", err=True)
        return EXIT_DESIGN
    click.echo(f"✅ Design finished at T*={result.stop_time} ({result.inputs.shape[0]} input samples)")
    click.echo(f"📊 LMI margin {result.margin:.3e}, final J {result.final_j:.3e}")
    click.echo(f"📁 Artifacts written to {out_dir}")
    return EXIT_OK


def run_validate(config_path, design_csv, out=None, seed=None, runs=None):
    """Monte Carlo identification on a designed input. Returns an exit code."""
    try:
        config, model, spec = load_config(config_path)
        inputs, outputs = artifacts.read_design_csv(design_csv)
    except ConfigError as exc:
        click.echo(f"❌ {exc}", err=True)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        click.echo(f"❌ {design_csv}: {exc}", err=True)
        return EXIT_CONFIG
    if inputs.shape[1] != model.n_u or outputs.shape[1] != model.n_y:
        click.echo(
            f"❌ {design_csv} has {inputs.shape[1]} input / {outputs.shape[1]} output columns, "
            f"model expects {model.n_u} / {model.n_y}",
            err=True,
        )
        return EXIT_CONFIG

    block = config.monte_carlo
    runs = block.runs if runs is None else runs
    seed = block.seed if seed is None else seed
    out_dir = Path(out) if out else Path(design_csv).resolve().parent
    click.echo(f"🔍 Validating {design_csv} with {runs} identification runs (seed {seed})")

    try:
        hessian = compute_hessian(model, config, spec)
        bank = sensitivity_impulse_responses(model, None, spec.truncation_n, 0, spec.tail_tolerance)
    except TruncationError as exc:
        click.echo(f"❌ {exc}", err=True)
        return EXIT_CONFIG
    except (HessianError, SimulationDivergence) as exc:
        click.echo(f"❌ Validation failed: {exc}", err=True)
        return EXIT_DESIGN
    fim = batch_information(bank, inputs, noise_whitener(model.lam))
    ellipsoids = EllipsoidPair(hessian, fim, model.theta_g, spec.gamma, spec.alpha)

    report = monte_carlo(model, inputs, ellipsoids, runs, seed, block.lambda_override, workers=_workers())
    artifacts.write_montecarlo_csv(out_dir / "montecarlo.csv", report, model.n_theta)
    artifacts.update_summary(
        out_dir / "summary.json",
        validation_runs=runs,
        validation_seed=seed,
        validation_seeds=[str(s) for s in report.seeds],
        inside_id_fraction=report.inside_id_fraction,
        inside_app_fraction=report.inside_app_fraction,
        flagged_runs=report.flagged_count,
        validation_lmi_margin=ellipsoids.id_inside_app().margin,
    )
    click.echo(f"✅ {report.inside_id_fraction:.1%} of estimates inside E_SI, {report.inside_app_fraction:.1%} inside E_app")
    if report.flagged_count:
        click.echo(f"⚠️  {report.flagged_count} runs flagged and excluded")
    click.echo(f"📁 Report written to {out_dir / 'montecarlo.csv'}")
    return EXIT_OK


@click.group()
def cli():
    """Time-domain applications-oriented input design."""
    logging.basicConfig(
        level=os.getenv("INPUT_DESIGN_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.argument("config_path", type=click.Path())
@click.option("--out", type=click.Path(), default=None, help="Artifact directory")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Seed for the initial semi-unitary matrix")
def design(config_path, out, seed):
    """
    Design a minimum-length input for CONFIG_PATH.

    Writes design.csv, trace.csv, fim.csv, hessian.csv, ellipsoids.csv and summary.json.
    """
    sys.exit(run_design(config_path, out, seed))


@cli.command()
@click.argument("config_path", type=click.Path())
@click.argument("design_csv", type=click.Path())
@click.option("--out", type=click.Path(), default=None, help="Report directory (defaults to the design's)")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Base seed for the noise realizations")
@click.option("--runs", type=click.IntRange(min=0), default=None, help="Number of identification runs")
def validate(config_path, design_csv, out, seed, runs):
    """Check ellipsoid coverage of DESIGN_CSV by Monte Carlo identification."""
    sys.exit(run_validate(config_path, design_csv, out, seed, runs))


@cli.command()
def schema():
    """Print the JSON schema of run configurations and model documents."""
    click.echo(json.dumps(schemas(), indent=2))


if __name__ == "__main__":
    cli()
