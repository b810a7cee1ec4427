"""
Application-oriented accuracy demands.

Vapp(theta) measures how much worse the control application performs with a
model theta instead of theta_0. Its Hessian shapes the application ellipsoid
E_app = {theta : (theta - theta_0)^T Vapp'' (theta - theta_0) <= 2/gamma}; the
identification ellipsoid E_SI = {theta : (theta - theta_0)^T I_F (theta - theta_0) <= chi2_alpha(n)}
must fit inside it, which is the LMI I_F / chi2 >= (gamma/2) Vapp''.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import eigh, eigvalsh
from scipy.special import gammaincinv

from lti_core import simulate

logger = logging.getLogger(__name__)

HESSIAN_STEP = 1e-4
CURVATURE_TOLERANCE = 1e-6
ELLIPSE_FLOOR = 1e-9


class HessianError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    gamma: float
    alpha: float
    u_max: float
    y_max: float
    horizon_nu: int
    truncation_n: int
    tol_j: float = 1e-12
    tol_inner: float = 1e-6
    max_inner: int = 50
    max_time: int = 200
    u_init_seed: int = 0
    tail_tolerance: float = 1e-6

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie strictly inside (0, 1), got {self.alpha}")
        for name in ("gamma", "u_max", "y_max", "tol_j", "tol_inner", "tail_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("horizon_nu", "truncation_n", "max_inner", "max_time"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")

    @classmethod
    def from_block(cls, block):
        return cls(
            gamma=block.gamma,
            alpha=block.alpha,
            u_max=block.u_max,
            y_max=block.y_max,
            horizon_nu=block.horizon_nu,
            truncation_n=block.truncation_n,
            tol_j=block.tol_j,
            tol_inner=block.tol_inner,
            max_inner=block.max_inner,
            max_time=block.max_time,
            u_init_seed=block.u_init_seed,
            tail_tolerance=block.tail_tolerance,
        )


def chi2_percentile(alpha, dof):
    """alpha-percentile of the chi-square distribution with dof degrees of freedom."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie strictly inside (0, 1), got {alpha}")
    if dof < 1:
        raise ValueError(f"dof must be at least 1, got {dof}")
    return 2.0 * float(gammaincinv(dof / 2.0, alpha))


def target_rhs(hessian, gamma, alpha, n_theta):
    """(chi2_alpha(n) gamma / 2) Vapp'': the information the experiment has to reach."""
    return 0.5 * chi2_percentile(alpha, n_theta) * gamma * np.asarray(hessian, dtype=float)


class LmiCheck(NamedTuple):
    satisfied: bool
    margin: float


def lmi_satisfied(i_f, hessian, gamma, alpha, n_theta, slack_tol=1e-6):
    """Returns (satisfied, margin) with margin = lambda_min(I_F / chi2 - (gamma/2) Vapp'')."""
    m = np.asarray(i_f, dtype=float) / chi2_percentile(alpha, n_theta) - 0.5 * gamma * np.asarray(hessian)
    margin = float(eigvalsh(0.5 * (m + m.T))[0])
    return LmiCheck(margin >= -slack_tol, margin)


def vapp_output_mismatch(model, theta_hat, theta0=None, controller=None, reference=1.0, horizon_n=50):
    """
    (1/N) sum ||y(t, theta_0) - y(t, theta_hat)||^2.

    Without a controller the outputs are the step responses of the two models to an
    input step of amplitude `reference`. With a closed-loop scenario (anything with
    outputs(theta_plant, theta_tuned, steps), such as harness.MpcScenario) both loops run
    on the plant at theta_0, one tuned with theta_0 and one with theta_hat.
    """
    theta0 = model.theta_g if theta0 is None else np.asarray(theta0, dtype=float)
    theta_hat = np.asarray(theta_hat, dtype=float)
    if controller is None:
        u = np.full((horizon_n, model.n_u), float(reference))
        y_true = simulate(model, theta0, u)
        y_hat = simulate(model, theta_hat, u)
    else:
        y_true = controller.outputs(theta0, theta0, horizon_n)
        y_hat = controller.outputs(theta0, theta_hat, horizon_n)
    return float(np.sum((y_true - y_hat) ** 2) / horizon_n)


def _hessian_points(theta0, steps):
    """Evaluation points for the central-difference Hessian with the given per-coordinate steps."""
    n = theta0.size
    points = {}
    for i in range(n):
        for si in (1, -1):
            x = theta0.copy()
            x[i] += si * steps[i]
            points[(i, si)] = x
        for j in range(i + 1, n):
            for si in (1, -1):
                for sj in (1, -1):
                    x = theta0.copy()
                    x[i] += si * steps[i]
                    x[j] += sj * steps[j]
                    points[(i, si, j, sj)] = x
    return points


def _assemble(values, center, steps):
    n = steps.size
    h = np.empty((n, n))
    for i in range(n):
        h[i, i] = (values[(i, 1)] - 2 * center + values[(i, -1)]) / steps[i] ** 2
        for j in range(i + 1, n):
            h[i, j] = h[j, i] = (
                values[(i, 1, j, 1)] - values[(i, 1, j, -1)] - values[(i, -1, j, 1)] + values[(i, -1, j, -1)]
            ) / (4 * steps[i] * steps[j])
    return h


def numerical_hessian(f, theta0, n_theta=None, step=HESSIAN_STEP, workers=1):
    """
    Central-difference Hessian of f at theta0 with one Richardson extrapolation level and
    checked for curvature. The mixed stencil is evaluated once per pair, so the result is
    exactly symmetric. Small negative eigenvalues are clamped to 0;
    materially negative ones raise HessianError.
    """
    theta0 = np.asarray(theta0, dtype=float).ravel()
    if n_theta is not None and theta0.size != n_theta:
        raise ValueError(f"theta0 has {theta0.size} entries, expected {n_theta}")
    steps = step * np.maximum(1.0, np.abs(theta0))

    coarse = _hessian_points(theta0, steps)
    fine = _hessian_points(theta0, steps / 2)
    keys = [("coarse", k) for k in coarse] + [("fine", k) for k in fine]
    points = [coarse[k] for k in coarse] + [fine[k] for k in fine]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="hessian") as executor:
            evaluated = list(executor.map(f, points))
    else:
        evaluated = [f(x) for x in points]
    evaluated = np.asarray(evaluated, dtype=float)
    if not np.all(np.isfinite(evaluated)):
        raise HessianError("application cost returned non-finite values near theta_0")

    center = float(f(theta0))
    coarse_values = {k: v for (level, k), v in zip(keys, evaluated) if level == "coarse"}
    fine_values = {k: v for (level, k), v in zip(keys, evaluated) if level == "fine"}
    hessian = (4 * _assemble(fine_values, center, steps / 2) - _assemble(coarse_values, center, steps)) / 3


    w, v = eigh(hessian)
    tolerance = CURVATURE_TOLERANCE * max(1.0, abs(w[-1]))
    if w[0] < -tolerance:
        raise HessianError(
            f"Vapp has negative curvature {w[0]:.3e} at theta_0; theta_0 is not a minimum of the "
            f"application cost, review the Vapp scenario"
        )
    if w[0] < 0:
        logger.warning(f"Clamping Hessian eigenvalue {w[0]:.3e} to zero")
        hessian = (v * np.maximum(w, 0.0)) @ v.T
        hessian = 0.5 * (hessian + hessian.T)
    return hessian


def application_hessian(model, theta0=None, controller=None, reference=1.0, horizon_n=50, workers=1):
    """Vapp'' at theta_0 for the open-loop step or closed-loop scenario."""
    theta0 = model.theta_g if theta0 is None else np.asarray(theta0, dtype=float)

    def cost(theta):
        return vapp_output_mismatch(model, theta, theta0, controller, reference, horizon_n)

    hessian = numerical_hessian(cost, theta0, model.n_theta, workers=workers)
    logger.info(f"Application Hessian eigenvalues: {np.array2string(eigvalsh(hessian), precision=4)}")
    return hessian


@dataclass(frozen=True, eq=False)
class EllipsoidPair:
    app_shape: np.ndarray
    id_shape: np.ndarray
    center: np.ndarray
    gamma: float
    alpha: float

    @property
    def n_theta(self):
        return self.center.size

    @property
    def app_level(self):
        return 2.0 / self.gamma

    @property
    def id_level(self):
        return chi2_percentile(self.alpha, self.n_theta)

    def _quadratic(self, shape, theta):
        delta = np.asarray(theta, dtype=float) - self.center
        return float(delta @ shape @ delta)

    def in_app(self, theta):
        return self._quadratic(self.app_shape, theta) <= self.app_level

    def in_id(self, theta):
        return self._quadratic(self.id_shape, theta) <= self.id_level

    def id_inside_app(self, slack_tol=1e-6):
        return lmi_satisfied(self.id_shape, self.app_shape, self.gamma, self.alpha, self.n_theta, slack_tol)

    def boundary_points(self, count=200, pair=(0, 1)):
        """
        Boundary samples of the central 2-D slices through theta_0 in the (i, j) parameter plane.
        Returns (app_points, id_points), each (count, 2) in parameter coordinates.
        """
        i, j = pair
        angles = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
        circle = np.column_stack([np.cos(angles), np.sin(angles)])
        result = []
        for shape, level in ((self.app_shape, self.app_level), (self.id_shape, self.id_level)):
            block = np.asarray(shape)[np.ix_([i, j], [i, j])]
            w, v = eigh(0.5 * (block + block.T))
            w = np.maximum(w, ELLIPSE_FLOOR * max(w[-1], ELLIPSE_FLOOR))
            # x^T block x = level on the boundary
            points = (circle * np.sqrt(level / w)) @ v.T
            result.append(points + self.center[[i, j]])
        return tuple(result)
