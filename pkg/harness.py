"""
Validation harness: prediction-error identification on designed inputs, Monte Carlo
ellipsoid coverage and the model predictive controller used by the closed-loop
application cost.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import cholesky

from cyclic import QpInfeasible, solve_qp
from fisher import noise_whitener
from lti_core import FirStructure, SimulationDivergence, markov_parameters, simulate

logger = logging.getLogger(__name__)

GN_MAX_ITER = 100
GN_GRADIENT_TOL = 1e-8
GN_STEP_TOL = 1e-12
JACOBIAN_STEP = 1e-6


class IdentificationResult(NamedTuple):
    theta_hat: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    seed: int


def noise_realization(model, length, seed, lam=None):
    """White Gaussian e(1..length) with covariance lam (model.lam by default); lam = 0 gives zeros."""
    lam = model.lam if lam is None else np.atleast_2d(np.asarray(lam, dtype=float))
    if lam.shape == (1, 1) and model.n_y > 1:
        lam = lam[0, 0] * np.eye(model.n_y)
    if not np.any(lam):
        return np.zeros((length, model.n_y))
    rng = np.random.default_rng(seed)
    return rng.standard_normal((length, model.n_y)) @ cholesky(lam, lower=True).T


def _prediction_errors(model, theta, u, y, whitener):
    errors = model.inverse_noise_filter(y - simulate(model, theta, u))
    return (errors @ whitener.T).ravel()


def _fir_least_squares(model, u, y, whitener):
    n = model.n_theta
    regressors = np.empty((y.size, n))
    for i in range(n):
        unit = np.zeros(n)
        unit[i] = 1.0
        response = model.inverse_noise_filter(simulate(model, unit, u))
        regressors[:, i] = (response @ whitener.T).ravel()
    target = (model.inverse_noise_filter(y) @ whitener.T).ravel()
    theta, *_ = np.linalg.lstsq(regressors, target, rcond=None)
    gradient = regressors.T @ (regressors @ theta - target)
    return theta, float(np.linalg.norm(gradient, np.inf))


def _jacobian(model, theta, u, whitener):
    """Central-difference Jacobian of the prediction errors."""
    columns = []
    for i in range(theta.size):
        h = max(JACOBIAN_STEP, JACOBIAN_STEP * abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        delta = simulate(model, up, u) - simulate(model, down, u)
        columns.append(-(model.inverse_noise_filter(delta / (2 * h)) @ whitener.T).ravel())
    return np.column_stack(columns)


def _gauss_newton(model, u, y, whitener, start):
    """
    Levenberg-damped Gauss-Newton on the summed squared prediction errors.
    Returns (theta, converged, iterations, grad_norm).
    """
    theta = start.copy()
    residual = _prediction_errors(model, theta, u, y, whitener)
    cost = residual @ residual
    grad_norm = np.inf
    for iteration in range(1, GN_MAX_ITER + 1):
        jac = _jacobian(model, theta, u, whitener)
        gradient = jac.T @ residual
        grad_norm = float(np.linalg.norm(gradient, np.inf))
        scale = max(1.0, np.linalg.norm(jac) * np.sqrt(cost))
        if grad_norm <= GN_GRADIENT_TOL * scale:
            return theta, True, iteration, grad_norm

        normal = jac.T @ jac
        damping = 0.0
        accepted = False
        for _ in range(30):
            lhs = normal + damping * np.diag(np.maximum(np.diag(normal), 1e-12))
            step = np.linalg.lstsq(lhs, -gradient, rcond=None)[0]
            trial = theta + step
            try:
                trial_residual = _prediction_errors(model, trial, u, y, whitener)
            except SimulationDivergence:
                damping = max(1e-8, 10 * damping)
                continue
            trial_cost = trial_residual @ trial_residual
            if trial_cost < cost:
                accepted = True
                break
            damping = max(1e-8, 10 * damping)

        if not accepted:
            # no descent left: stationary up to rounding
            return theta, grad_norm <= 1e-6 * scale, iteration, grad_norm
        theta, residual, cost = trial, trial_residual, trial_cost
        if np.linalg.norm(step) <= GN_STEP_TOL * max(1.0, np.linalg.norm(theta)):
            return theta, True, iteration, grad_norm
    return theta, False, GN_MAX_ITER, grad_norm


def gauss_newton_start(theta0):
    start = np.asarray(theta0, dtype=float) * 1.01
    start[start == 0] = 0.01
    return start


def identify(model, u, noise_seed, lam=None, theta_start=None):
    """
    Prediction-error estimate of theta_G from one noisy experiment with input u.

    FIR plants are linear in theta and solved by least squares; other structures use
    Gauss-Newton from a 1% perturbation of theta_0. The noise covariance lam only
    changes the realization: the prediction errors are always weighted by model.lam.
    """
    u = np.asarray(u, dtype=float).reshape(-1, model.n_u)
    noise = noise_realization(model, u.shape[0], noise_seed, lam)
    y = simulate(model, model.theta_g, u, noise=noise)
    whitener = noise_whitener(model.lam)

    if isinstance(model.structure, FirStructure):
        theta, grad_norm = _fir_least_squares(model, u, y, whitener)
        return IdentificationResult(theta, True, 1, grad_norm, noise_seed)

    start = gauss_newton_start(model.theta_g) if theta_start is None else np.asarray(theta_start, dtype=float)
    theta, converged, iterations, grad_norm = _gauss_newton(model, u, y, whitener, start)
    if not converged:
        logger.warning(f"Gauss-Newton did not converge for seed {noise_seed} (|grad|={grad_norm:.2e})")
    return IdentificationResult(theta, converged, iterations, grad_norm, noise_seed)


@dataclass(eq=False)
class MpcController:
    """
    Offset-free tracking MPC built on the Markov parameters of the model at theta.

    Predictions add a constant output bias d = y_measured - y_model to the model's
    free response. Cost: q ||y - r||^2 + r ||delta u||^2 over the horizon, subject to
    the same amplitude bounds as the experiment.
    """

    model: object
    theta: np.ndarray
    q_weight: float = 1.0
    r_weight: float = 0.001
    horizon: int = 5
    u_max: float = np.inf
    y_max: float = np.inf
    reference: float = 0.0
    saturated_steps: int = field(default=0, init=False)
    _inputs: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        if self.q_weight < 0 or self.r_weight < 0:
            raise ValueError("MPC weights must be nonnegative")
        model, hp = self.model, self.horizon
        self.theta = np.asarray(self.theta, dtype=float)
        markov = markov_parameters(model, self.theta, hp + 1)
        n_y, n_u = model.n_y, model.n_u
        self._prediction = np.zeros((hp * n_y, hp * n_u))
        for i in range(hp):
            for j in range(i + 1):
                self._prediction[i * n_y : (i + 1) * n_y, j * n_u : (j + 1) * n_u] = markov[i + 1 - j]
        self._difference = np.eye(hp * n_u) - np.eye(hp * n_u, k=-n_u)

    def reset(self):
        self._inputs = []
        self.saturated_steps = 0

    def _bounds(self, size):
        rows, limits = [], []
        if np.isfinite(self.u_max):
            rows += [np.eye(size), -np.eye(size)]
            limits += [np.full(size, self.u_max)] * 2
        return rows, limits

    def control(self, y_measured):
        model, hp = self.model, self.horizon
        n_u = model.n_u
        history = np.asarray(self._inputs, dtype=float).reshape(-1, n_u)
        k = history.shape[0]
        padded = np.vstack([history, np.zeros((hp + 1, n_u))])
        predicted = simulate(model, self.theta, padded)
        bias = np.asarray(y_measured, dtype=float).ravel() - predicted[k]
        offset = (predicted[k + 1 : k + 1 + hp] + bias).ravel()
        target = np.full(offset.size, float(self.reference))

        previous = np.zeros(hp * n_u)
        if k:
            previous[:n_u] = history[-1]
        G, D = self._prediction, self._difference
        P = 2.0 * (self.q_weight * G.T @ G + self.r_weight * D.T @ D)
        q = 2.0 * (self.q_weight * G.T @ (offset - target) - self.r_weight * D.T @ previous)

        rows, limits = self._bounds(hp * n_u)
        bound_rows, bound_limits = list(rows), list(limits)
        if np.isfinite(self.y_max):
            rows += [G, -G]
            limits += [self.y_max - offset, self.y_max + offset]
        A = np.vstack(rows) if rows else np.zeros((0, hp * n_u))
        b = np.concatenate(limits) if limits else np.zeros(0)

        try:
            x = solve_qp(P, q, A, b).x
        except QpInfeasible:
            self.saturated_steps += 1
            logger.warning(f"MPC step {k}: output bounds infeasible, saturating on input bounds only")
            A = np.vstack(bound_rows) if bound_rows else np.zeros((0, hp * n_u))
            b = np.concatenate(bound_limits) if bound_limits else np.zeros(0)
            x = solve_qp(P, q, A, b).x
        move = np.clip(x[:n_u], -self.u_max, self.u_max)
        self._inputs.append(move)
        return move


def mpc_controller(model, theta, q_weight, r_weight, horizon, bounds, reference):
    """bounds = (u_max, y_max)."""
    u_max, y_max = bounds
    return MpcController(model, theta, q_weight, r_weight, horizon, u_max, y_max, reference)


class ClosedLoopTrace(NamedTuple):
    inputs: np.ndarray
    outputs: np.ndarray
    saturated_steps: int


def closed_loop(model, theta_plant, controller, steps, noise=None):
    """
    Run controller against the plant at theta_plant from rest for `steps` samples.
    The plant is strictly proper, so y(k) is measured before u(k) is chosen.
    """
    controller.reset()
    markov = markov_parameters(model, theta_plant, steps + 1)
    inputs = np.zeros((steps, model.n_u))
    outputs = np.zeros((steps, model.n_y))
    for k in range(steps):
        if k:
            # y(k) = sum_{j<k} h(k - j) u(j)
            outputs[k] = np.einsum("jab,jb->a", markov[k:0:-1], inputs[:k])
        measured = outputs[k] + (noise[k] if noise is not None else 0.0)
        inputs[k] = controller.control(measured)
    return ClosedLoopTrace(inputs, outputs, controller.saturated_steps)


@dataclass(frozen=True, eq=False)
class MpcScenario:
    """Closed-loop application scenario: an MPC tuned with some theta running on a plant."""

    model: object
    vapp: object
    u_max: float
    y_max: float

    def controller(self, theta):
        """Fresh MpcController tuned with theta."""
        vapp = self.vapp
        return MpcController(
            self.model, theta, vapp.q_weight, vapp.r_weight, vapp.mpc_horizon, self.u_max, self.y_max, vapp.reference
        )

    def outputs(self, theta_plant, theta_tuned, steps):
        return closed_loop(self.model, theta_plant, self.controller(theta_tuned), steps).outputs


@dataclass(frozen=True, eq=False)
class MonteCarloReport:
    estimates: np.ndarray
    inside_id: np.ndarray
    inside_app: np.ndarray
    flagged: np.ndarray
    seeds: tuple
    iterations: np.ndarray

    @property
    def runs(self):
        return len(self.seeds)

    @property
    def flagged_count(self):
        return int(self.flagged.sum())

    def _fraction(self, mask):
        kept = ~self.flagged
        if not kept.any():
            return 0.0
        return float(mask[kept].mean())

    @property
    def inside_id_fraction(self):
        return self._fraction(self.inside_id)

    @property
    def inside_app_fraction(self):
        return self._fraction(self.inside_app)


def run_seeds(base_seed, runs):
    if runs == 0:
        return ()
    return tuple(int(s) for s in np.random.SeedSequence(base_seed).generate_state(runs, dtype=np.uint64))


def monte_carlo(model, designed_u, ellipsoids, runs, base_seed, lam=None, workers=1):
    """
    Identify theta from `runs` independent noise realizations of the designed experiment
    and count how many estimates land in each ellipsoid. Deterministic for a base_seed.
    """
    seeds = run_seeds(base_seed, runs)
    n = model.n_theta
    if runs == 0:
        empty = np.zeros(0, dtype=bool)
        return MonteCarloReport(np.zeros((0, n)), empty, empty, empty, (), np.zeros(0, dtype=int))

    def run(seed):
        try:
            return identify(model, designed_u, seed, lam)
        except SimulationDivergence as exc:
            logger.warning(f"Identification diverged for seed {seed}: {exc}")
            return IdentificationResult(np.full(n, np.nan), False, 0, np.inf, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="montecarlo") as executor:
            results = list(executor.map(run, seeds))
    else:
        results = [run(seed) for seed in seeds]

    estimates = np.vstack([r.theta_hat for r in results])
    flagged = np.array([not r.converged for r in results])
    inside_id = np.array([not f and ellipsoids.in_id(e) for e, f in zip(estimates, flagged)])
    inside_app = np.array([not f and ellipsoids.in_app(e) for e, f in zip(estimates, flagged)])
    report = MonteCarloReport(
        estimates, inside_id, inside_app, flagged, seeds, np.array([r.iterations for r in results])
    )
    if report.flagged_count:
        logger.warning(f"{report.flagged_count} of {runs} identification runs flagged and excluded")
    logger.info(
        f"Monte Carlo: {report.inside_id_fraction:.1%} inside E_SI, {report.inside_app_fraction:.1%} inside E_app"
    )
    return report
