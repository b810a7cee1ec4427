"""
Artifact files written by the CLI. Every number is printed with 17 significant
digits so a written CSV parses back to the same floats.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_FORMAT = ".17g"


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return format(float(value), FLOAT_FORMAT)


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] if header else []
    lines += [",".join(_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_matrix_csv(path, matrix):
    return _write_rows(path, None, np.atleast_2d(matrix))


def read_matrix_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_design_csv(path, inputs, outputs):
    """Columns t, u1..u_nu, y1..y_ny with t starting at 1."""
    inputs = np.asarray(inputs).reshape(len(inputs), -1)
    outputs = np.asarray(outputs).reshape(len(outputs), -1)
    header = ["t"] + [f"u{i + 1}" for i in range(inputs.shape[1])] + [f"y{i + 1}" for i in range(outputs.shape[1])]
    rows = [[t + 1, *inputs[t], *outputs[t]] for t in range(inputs.shape[0])]
    return _write_rows(path, header, rows)


def read_design_csv(path):
    """
    Returns (inputs, outputs) from a design CSV.
    Raises ValueError when the header is not a design header.
    """
    path = Path(path)
    header = path.read_text().splitlines()[0].split(",")
    if not header or header[0] != "t":
        raise ValueError(f"{path} is not a design file (header {header})")
    n_u = sum(1 for name in header if name.startswith("u"))
    n_y = sum(1 for name in header if name.startswith("y"))
    if n_u == 0 or 1 + n_u + n_y != len(header):
        raise ValueError(f"{path}: unexpected design columns {header}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros((0, n_u)), np.zeros((0, n_y))
    return data[:, 1 : 1 + n_u], data[:, 1 + n_u :]


def write_trace_csv(path, trace):
    """One row per sample; rejected_J is empty unless the last inner cycle raised J."""
    n_u = len(trace[0].first_input) if trace else 1
    header = ["t", "J", "margin", "inner_iterations"] + [f"first_u{i + 1}" for i in range(n_u)]
    header += ["converged", "rejected", "rejected_J"]
    rows = [
        [row.t, row.J, row.margin, row.inner_iterations, *row.first_input, row.converged, row.rejected,
         "" if row.rejected_J is None else row.rejected_J]
        for row in trace
    ]
    return _write_rows(path, header, rows)


def write_montecarlo_csv(path, report, n_theta):
    header = ["run", "seed"] + [f"theta{i + 1}" for i in range(n_theta)] + ["in_si", "in_app", "flagged"]
    rows = [
        [run + 1, str(report.seeds[run]), *report.estimates[run], report.inside_id[run], report.inside_app[run],
         report.flagged[run]]
        for run in range(report.runs)
    ]
    return _write_rows(path, header, rows)


def write_ellipsoids_csv(path, ellipsoids, count=200):
    """Boundary samples of both ellipsoids for every parameter pair (i < j)."""
    header = ["i", "j", "ellipsoid", "theta_i", "theta_j"]
    rows = []
    n = ellipsoids.n_theta
    for i in range(n):
        for j in range(i + 1, n):
            app, ident = ellipsoids.boundary_points(count, (i, j))
            rows += [[i + 1, j + 1, "app", *p] for p in app]
            rows += [[i + 1, j + 1, "si", *p] for p in ident]
    return _write_rows(path, header, rows)


def read_summary(path):
    path = Path(path)
    if not path.is_file():
        return {}
    return json.loads(path.read_text())


def update_summary(path, **fields):
    """Merge fields into summary.json, creating it when missing."""
    summary = read_summary(path)
    summary.update(fields)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    logger.debug(f"Updated {path} with {sorted(fields)}")
    return summary


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")
