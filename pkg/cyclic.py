"""
Receding-horizon cyclic input design.

At every sample t the designer looks for horizon inputs u(t..t+N_u) and a slack
S >= 0 with Phi(u)^T Phi(u) + C(t-1) = S, C(t-1) = Ibar^{t-1} - (chi2 gamma / 2) Vapp''.
The non-convex problem is split into three exact block minimizations that are
cycled until the slack residual J = ||Phi^T Phi + C - S||_F^2 settles:

  1.1  u  <- constrained least squares fit of Phi(u) to U (S - C)^{1/2}  (convex QP)
  1.2  U  <- orthogonal Procrustes rotation aligning U (S - C)^{1/2} with Phi(u)
  2    S  <- PSD projection of Phi^T Phi + C

Only the first horizon input is applied. The design stops the first time J_t
reaches tol_j, i.e. once the accumulated information dominates the target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import eigh, qr, svd
from scipy.optimize import linprog

from appset import chi2_percentile, lmi_satisfied, target_rhs
from fisher import InformationState, commit_step, fim_from_phi, noise_whitener
from lti_core import markov_parameters, sensitivity_impulse_responses, simulate

logger = logging.getLogger(__name__)

QP_MAX_ITER = 500
QP_TOLERANCE = 1e-9
FEASIBILITY_TOLERANCE = 1e-9
DEGENERACY_RATIO = 1e-12
DESCENT_SLACK = 1e-10


class QpInfeasible(RuntimeError):
    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate or {}


class QpResult(NamedTuple):
    x: np.ndarray
    multipliers: np.ndarray
    active: tuple
    iterations: int
    kkt_residual: float
    converged: bool


def _kkt_step(P, g, A_work):
    """Solve min 1/2 p^T P p + g^T p s.t. A_work p = 0. Returns (p, multipliers)."""
    n, m = P.shape[0], A_work.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = P
    kkt[:n, n:] = A_work.T
    kkt[n:, :n] = A_work
    rhs = np.concatenate([-g, np.zeros(m)])
    solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return solution[:n], solution[n:]


def _feasible_start(A, b, x0):
    n = A.shape[1]
    for candidate in (x0, np.zeros(n)):
        if candidate is not None and np.all(A @ candidate <= b + FEASIBILITY_TOLERANCE):
            return np.asarray(candidate, dtype=float)

    lp = linprog(np.zeros(n), A_ub=A, b_ub=b, bounds=[(None, None)] * n, method="highs")
    if lp.status != 0:
        violated = np.nonzero(b < -FEASIBILITY_TOLERANCE)[0]
        raise QpInfeasible(
            f"constraint set is empty (phase-one LP status {lp.status}: {lp.message})",
            certificate={"violated_rows": violated.tolist(), "lp_status": int(lp.status), "lp_message": lp.message},
        )
    return lp.x


def solve_qp(P, q, A_ineq, b_ineq, x0=None, max_iter=QP_MAX_ITER, tol=QP_TOLERANCE):
    """
    Primal active-set solver for min 1/2 x^T P x + q^T x s.t. A_ineq x <= b_ineq, P PSD.

    Starts from x0 when it is feasible, else from 0, else from a phase-one LP point.
    Raises QpInfeasible when the constraint set is empty.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    A = np.asarray(A_ineq, dtype=float).reshape(-1, q.size)
    b = np.asarray(b_ineq, dtype=float)

    x = _feasible_start(A, b, x0)
    working = [i for i in np.nonzero(np.abs(A @ x - b) <= FEASIBILITY_TOLERANCE)[0]]
    # keep the initial working set linearly independent
    if working:
        _, r, pivots = qr(A[working].T, pivoting=True)
        rank = int(np.sum(np.abs(np.diag(r)) > 1e-10)) if r.size else 0
        working = [working[k] for k in sorted(pivots[:rank])]

    multipliers = np.zeros(0)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        g = P @ x + q
        p, multipliers = _kkt_step(P, g, A[working] if working else np.zeros((0, q.size)))
        if np.linalg.norm(p, np.inf) <= tol * max(1.0, np.linalg.norm(x, np.inf)):
            if not working or multipliers.min() >= -tol * max(1.0, np.linalg.norm(g, np.inf)):
                converged = True
                break
            working.pop(int(np.argmin(multipliers)))
            continue

        step = 1.0
        blocking = None
        slopes = A @ p
        for i in range(A.shape[0]):
            if i in working or slopes[i] <= 1e-14:
                continue
            ratio = (b[i] - A[i] @ x) / slopes[i]
            if ratio < step:
                step, blocking = max(ratio, 0.0), i
        x = x + step * p
        if blocking is not None:
            working.append(blocking)

    full = np.zeros(A.shape[0])
    if working and multipliers.size == len(working):
        full[working] = multipliers
    stationarity = np.linalg.norm(P @ x + q + A.T @ full, np.inf) / max(1.0, np.linalg.norm(q, np.inf))
    infeasibility = max(0.0, float(np.max(A @ x - b, initial=0.0)))
    residual = max(stationarity, infeasibility, float(np.max(-full, initial=0.0)))
    if not converged:
        logger.warning(f"Active-set QP stopped after {max_iter} iterations (KKT residual {residual:.2e})")
    return QpResult(x, full, tuple(sorted(working)), iterations, residual, converged)


def psd_sqrt(m):
    """Hermitian square root with eigenvalues clamped at zero."""
    w, v = eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def step2_psd_project(m):
    """Frobenius-nearest PSD matrix: clamp negative eigenvalues."""
    w, v = eigh(0.5 * (m + m.T))
    projected = (v * np.maximum(w, 0.0)) @ v.T
    return 0.5 * (projected + projected.T)


def step1_2_procrustes(phi, sqrt_target):
    """
    Semi-unitary U minimizing ||phi - U sqrt_target||_F.
    Returns (U, degenerate) where degenerate flags a rank-deficient sqrt_target phi^T.
    """
    rows, n_theta = phi.shape
    if rows < n_theta:
        raise ValueError(f"Phi has {rows} rows but {n_theta} columns; a semi-unitary U needs rows >= columns")
    left, sigma, right_t = svd(sqrt_target @ phi.T, full_matrices=False)
    degenerate = bool(sigma[-1] <= DEGENERACY_RATIO * max(1.0, sigma[0]))
    return right_t.T @ left.T, degenerate


def slack_residual(phi, c_matrix, s):
    return float(np.linalg.norm(phi.T @ phi + c_matrix - s, "fro") ** 2)


@dataclass(frozen=True, eq=False)
class CyclicIterate:
    horizon: np.ndarray
    U: np.ndarray
    S: np.ndarray
    J: float
    phi: Optional[np.ndarray] = None
    iterations: int = 0
    converged: bool = False
    rejected: bool = False
    degenerate: bool = False
    j_trace: tuple = ()
    rejected_j: Optional[float] = None

    @property
    def accepted_trace(self):
        """J of the cycles that were kept; j_trace also ends with the rejected cycle, if any."""
        return self.j_trace[:-1] if self.rejected else self.j_trace

    def shifted(self, n_u):
        """Next sample's warm start: drop the applied input and repeat the last one."""
        h = self.horizon.reshape(-1, n_u)
        return replace(self, horizon=np.vstack([h[1:], h[-1:]]).ravel())


@dataclass(frozen=True, eq=False)
class DesignProblem:
    """Everything that stays fixed during one design session."""

    model: object
    theta0: np.ndarray
    spec: object
    hessian: np.ndarray
    rhs: np.ndarray
    chi2: float
    bank: object
    whitener: np.ndarray
    markov: np.ndarray
    past_parts: tuple = field(repr=False, default=())
    horizon_stack: np.ndarray = field(repr=False, default=None)
    gram: np.ndarray = field(repr=False, default=None)
    output_map: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls, model, spec, hessian, theta0=None):
        theta0 = model.theta_g if theta0 is None else np.asarray(theta0, dtype=float)
        hessian = np.asarray(hessian, dtype=float)
        if hessian.shape != (model.n_theta, model.n_theta):
            raise ValueError(f"Hessian must be {model.n_theta}x{model.n_theta}, got {hessian.shape}")
        if (spec.horizon_nu + 1) * model.n_y < model.n_theta:
            raise ValueError(
                f"horizon N_u={spec.horizon_nu} gives {(spec.horizon_nu + 1) * model.n_y} rows in Phi, "
                f"fewer than the {model.n_theta} parameters"
            )
        bank = sensitivity_impulse_responses(
            model, theta0, spec.truncation_n, spec.horizon_nu, tail_tolerance=spec.tail_tolerance
        )
        whitener = noise_whitener(model.lam)
        big_whitener = np.kron(np.eye(spec.horizon_nu + 1), whitener)
        split = bank.past_length
        whitened = [big_whitener @ f for f in bank.toeplitz]
        horizon_stack = np.vstack([w[:, split:] for w in whitened])

        # noiseless outputs y(t..t+N_u+1) respond to the horizon through the Markov parameters
        rows = spec.horizon_nu + 2
        markov = markov_parameters(model, theta0, rows)
        output_map = np.zeros((rows * model.n_y, (spec.horizon_nu + 1) * model.n_u))
        for k in range(rows):
            for j in range(min(k, spec.horizon_nu) + 1):
                output_map[k * model.n_y : (k + 1) * model.n_y, j * model.n_u : (j + 1) * model.n_u] = markov[k - j]

        return cls(
            model=model,
            theta0=theta0,
            spec=spec,
            hessian=hessian,
            rhs=target_rhs(hessian, spec.gamma, spec.alpha, model.n_theta),
            chi2=chi2_percentile(spec.alpha, model.n_theta),
            bank=bank,
            whitener=whitener,
            markov=markov,
            past_parts=tuple(w[:, :split] for w in whitened),
            horizon_stack=horizon_stack,
            gram=horizon_stack.T @ horizon_stack,
            output_map=output_map,
        )

    @property
    def n_u(self):
        return self.model.n_u

    @property
    def horizon_size(self):
        return self.bank.horizon_length

    def past_block(self, committed):
        """u*(t-n+1..t-1) flattened, zeros before the experiment starts."""
        lags = self.bank.truncation_n - 1
        recent = committed[max(0, committed.shape[0] - lags) :]
        pad = np.zeros((lags - recent.shape[0], self.n_u))
        return np.vstack([pad, recent]).ravel()

    def phi(self, past, horizon):
        offsets = [part @ past for part in self.past_parts]
        rows = offsets[0].size
        moving = (self.horizon_stack @ horizon).reshape(len(offsets), rows)
        return np.column_stack([offsets[i] + moving[i] for i in range(len(offsets))])

    def free_outputs(self, committed):
        """Noiseless y(t..t+N_u+1) produced by the committed inputs alone."""
        t = committed.shape[0] + 1
        padded = np.vstack([committed, np.zeros((self.spec.horizon_nu + 2, self.n_u))])
        return simulate(self.model, self.theta0, padded)[t - 1 :].ravel()

    def constraints(self, y_free):
        """Returns (A, b) with A x <= b for the amplitude bounds on inputs and noiseless outputs."""
        spec = self.spec
        eye = np.eye(self.horizon_size)
        live = np.linalg.norm(self.output_map, axis=1) > 0
        dead = ~live
        if dead.any() and np.abs(y_free[dead]).max() > spec.y_max + FEASIBILITY_TOLERANCE:
            violated = np.nonzero(dead & (np.abs(y_free) > spec.y_max + FEASIBILITY_TOLERANCE))[0]
            raise QpInfeasible(
                f"committed inputs already drive the noiseless output to {np.abs(y_free[dead]).max():.4g} "
                f"beyond y_max={spec.y_max}",
                certificate={"violated_rows": violated.tolist(), "lp_status": None},
            )
        G = self.output_map[live]
        free = y_free[live]
        A = np.vstack([eye, -eye, G, -G])
        b = np.concatenate(
            [
                np.full(self.horizon_size, spec.u_max),
                np.full(self.horizon_size, spec.u_max),
                spec.y_max - free,
                spec.y_max + free,
            ]
        )
        return A, b

    def initial_iterate(self):
        rows = (self.spec.horizon_nu + 1) * self.model.n_y
        rng = np.random.default_rng(self.spec.u_init_seed)
        U, _ = qr(rng.standard_normal((rows, self.model.n_theta)), mode="economic")
        n = self.model.n_theta
        return CyclicIterate(np.zeros(self.horizon_size), U, np.zeros((n, n)), np.inf)


def step1_1_qp(problem, state, past, U_fixed, S_fixed, constraints, x0=None):
    """
    Horizon inputs minimizing ||Phi(u) - U (S - C)^{1/2}||_F^2 under the amplitude bounds.
    Returns (horizon, QpResult).
    """
    target = U_fixed @ psd_sqrt(S_fixed - state.c_matrix)
    offsets = np.concatenate([part @ past for part in problem.past_parts])
    residual = target.T.ravel() - offsets
    P = 2.0 * problem.gram
    q = -2.0 * problem.horizon_stack.T @ residual
    A, b = constraints
    result = solve_qp(P, q, A, b, x0)
    u_max = problem.spec.u_max
    return np.clip(result.x, -u_max, u_max), result


def _evaluate(problem, state, past, horizon):
    phi = problem.phi(past, horizon)
    s = step2_psd_project(phi.T @ phi + state.c_matrix)
    return phi, s, slack_residual(phi, state.c_matrix, s)


def inner_cycle(problem, state, past, constraints, warm):
    """
    Cycle the QP, Procrustes and projection steps from a warm start until J reaches
    tol_j, the iterate stalls or max_inner cycles ran. The iterate has stalled when the
    relative change in (u, S) and the relative decrease of J are both below tol_inner.
    A cycle that raises J is rejected and ends the loop with the previous iterate; its
    J is kept at the end of j_trace and in rejected_j.
    """
    spec = problem.spec
    horizon, U, S = warm.horizon, warm.U, warm.S
    best = None
    trace = []
    converged = rejected = degenerate = False
    rejected_j = None
    cycles = 0
    for cycles in range(1, spec.max_inner + 1):
        new_horizon, qp = step1_1_qp(problem, state, past, U, S, constraints, x0=horizon)
        phi = problem.phi(past, new_horizon)
        new_U, degenerate = step1_2_procrustes(phi, psd_sqrt(S - state.c_matrix))
        new_S = step2_psd_project(phi.T @ phi + state.c_matrix)
        J = slack_residual(phi, state.c_matrix, new_S)

        if best is not None and J > best.J + DESCENT_SLACK * max(1.0, best.J):
            rejected = True
            rejected_j = J
            trace.append(J)
            logger.debug(f"t={state.t + 1}: rejecting cycle {cycles}, J would rise {best.J:.3e} -> {J:.3e}")
            break

        change = (np.linalg.norm(new_horizon - horizon) + np.linalg.norm(new_S - S, "fro")) / max(
            1.0, np.linalg.norm(new_horizon) + np.linalg.norm(new_S, "fro")
        )
        decrease = np.inf if best is None else (best.J - J) / max(best.J, np.finfo(float).tiny)
        horizon, U, S = new_horizon, new_U, new_S
        trace.append(J)
        best = CyclicIterate(horizon, U, S, J, phi)
        logger.debug(f"t={state.t + 1} cycle {cycles}: J={J:.6e} change={change:.2e} qp_iters={qp.iterations}")
        if J <= spec.tol_j or (change <= spec.tol_inner and decrease <= spec.tol_inner):
            converged = True
            break

    if not converged and not rejected:
        logger.warning(f"t={state.t + 1}: inner cycle hit max_inner={spec.max_inner} with J={best.J:.3e}")
    if degenerate:
        logger.warning(f"t={state.t + 1}: Procrustes step was rank deficient")
    return replace(
        best,
        iterations=len(trace),
        converged=converged,
        rejected=rejected,
        degenerate=degenerate,
        j_trace=tuple(trace),
        rejected_j=rejected_j,
    )


class TraceRow(NamedTuple):
    t: int
    J: float
    margin: float
    inner_iterations: int
    first_input: tuple
    converged: bool
    rejected: bool = False
    rejected_J: Optional[float] = None


@dataclass(frozen=True, eq=False)
class DesignResult:
    inputs: np.ndarray
    outputs: np.ndarray
    trace: tuple
    cycle_traces: tuple
    final_fim: np.ndarray
    hessian: np.ndarray
    rhs: np.ndarray
    margin: float
    lmi_ok: bool
    stop_time: int
    status: str
    slack: np.ndarray
    stop_conditions_agree: bool
    final_j: float

    @property
    def succeeded(self):
        return self.status == "success"

    @property
    def rejected_cycles(self):
        return sum(row.rejected for row in self.trace)


def _stop_conditions_agree(fim, rhs, J, tol_j):
    """J <= tol_j must imply lambda_min(Ibar - RHS) >= -sqrt(tol_j) and the reverse for -sqrt(tol_j / n)."""
    gap = float(np.linalg.eigvalsh(0.5 * (fim - rhs + (fim - rhs).T))[0])
    n = rhs.shape[0]
    forward = J > tol_j or gap >= -np.sqrt(tol_j) * (1 + 1e-9)
    backward = gap < -np.sqrt(tol_j / n) or J <= tol_j * (1 + 1e-9)
    return bool(forward and backward)


def receding_horizon_design(model, spec, hessian, theta0=None, problem=None):
    """
    Design u*(1..T*+N_u). Returns a DesignResult whose status is "success" when the
    slack residual reached tol_j and "max_time" when the sample cap ran out first.
    """
    problem = problem or DesignProblem.build(model, spec, hessian, theta0)
    n_u = problem.n_u
    state = InformationState.initial(model.n_theta, problem.rhs)
    committed = np.zeros((0, n_u))
    iterate = problem.initial_iterate()
    trace, cycles = [], []
    status = "max_time"
    t = 0

    for t in range(1, spec.max_time + 1):
        past = problem.past_block(committed)
        phi0, s0, j0 = _evaluate(problem, state, past, np.zeros(problem.horizon_size))
        if j0 <= spec.tol_j:
            logger.info(f"t={t}: committed information already meets the target, no excitation needed")
            iterate = replace(iterate, horizon=np.zeros(problem.horizon_size), S=s0, J=j0, phi=phi0, iterations=0,
                              converged=True, rejected=False, rejected_j=None, j_trace=(j0,))
        else:
            constraints = problem.constraints(problem.free_outputs(committed))
            iterate = inner_cycle(problem, state, past, constraints, iterate.shifted(n_u))

        fim = fim_from_phi(iterate.phi, state)
        check = lmi_satisfied(fim, problem.hessian, spec.gamma, spec.alpha, model.n_theta)
        first = iterate.horizon[:n_u]
        trace.append(
            TraceRow(t, iterate.J, check.margin, iterate.iterations, tuple(first), iterate.converged,
                     iterate.rejected, iterate.rejected_j)
        )
        cycles.append(iterate.j_trace)
        logger.info(f"t={t}: J={iterate.J:.4e} margin={check.margin:.4e} inner={iterate.iterations}")

        if iterate.J <= spec.tol_j:
            status = "success"
            break
        if t == spec.max_time:
            break
        state = commit_step(state, problem.bank, first, committed, problem.whitener)
        committed = np.vstack([committed, first.reshape(1, n_u)])

    inputs = np.vstack([committed, iterate.horizon.reshape(-1, n_u)])
    outputs = simulate(model, problem.theta0, inputs)
    fim = fim_from_phi(iterate.phi, state)
    check = lmi_satisfied(fim, problem.hessian, spec.gamma, spec.alpha, model.n_theta)
    agree = _stop_conditions_agree(fim, problem.rhs, iterate.J, spec.tol_j)
    if status == "success":
        logger.info(f"Design finished at T*={t} with {inputs.shape[0]} input samples, LMI margin {check.margin:.3e}")
    else:
        logger.warning(f"Design did not terminate within max_time={spec.max_time} (J={iterate.J:.3e}); try a lower gamma")
    if not agree:
        logger.warning("Slack residual and LMI margin disagree on termination")

    return DesignResult(
        inputs=inputs,
        outputs=outputs,
        trace=tuple(trace),
        cycle_traces=tuple(cycles),
        final_fim=fim,
        hessian=problem.hessian,
        rhs=problem.rhs,
        margin=check.margin,
        lmi_ok=check.satisfied,
        stop_time=t,
        status=status,
        slack=iterate.S,
        stop_conditions_agree=agree,
        final_j=iterate.J,
    )
