"""
Parametrized discrete-time LTI models used by the input designer.

A model is y(t) = G(q, theta_G) u(t) + H(q, theta_H) e(t) with the plant and the
noise filter parametrized independently. Plants are FIR, affine state-space or
rational SISO transfer functions; H is a monic rational filter C(q)/D(q)
applied to every output channel (H = 1 when no noise model is declared).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from models import ModelDocument

logger = logging.getLogger(__name__)

OVERFLOW_GUARD = 1e12
TAIL_TOLERANCE = 1e-6
FD_STEP = 1e-6

_THETA_ENTRY = re.compile(r"^\s*(-?)\s*theta(\d+)\s*$")


class ModelError(ValueError):
    """Invalid model structure, parameters or dimensions."""


class SimulationDivergence(RuntimeError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class TruncationError(ValueError):
    """Discarded sensitivity energy beyond lag n exceeds the tail tolerance."""

    def __init__(self, parameter_index, tail_fraction, suggested_n):
        super().__init__(
            f"Impulse response of sensitivity filter {parameter_index} keeps "
            f"{tail_fraction:.3e} of its energy beyond the truncation length; "
            f"use truncation_n >= {suggested_n}"
        )
        self.parameter_index = parameter_index
        self.tail_fraction = tail_fraction
        self.suggested_n = suggested_n


class _Structure:
    """Plant structure: maps theta_G to a response. Derivatives default to central differences."""

    tag = ""

    def n_theta(self, n_y, n_u):
        raise NotImplementedError

    def simulate(self, theta, u, n_y):
        raise NotImplementedError

    def markov(self, theta, length, n_y, n_u):
        raise NotImplementedError

    def markov_gradient(self, theta, index, length, n_y, n_u):
        theta = np.asarray(theta, dtype=float)
        h = max(FD_STEP, FD_STEP * abs(theta[index]))
        up, down = theta.copy(), theta.copy()
        up[index] += h
        down[index] -= h
        return (self.markov(up, length, n_y, n_u) - self.markov(down, length, n_y, n_u)) / (2 * h)


@dataclass(frozen=True)
class FirStructure(_Structure):
    """y(t) = B_1 u(t-1) + ... + B_order u(t-order), theta = row-major taps."""

    order: int
    tag = "fir"

    def __post_init__(self):
        if self.order < 1:
            raise ModelError(f"FIR order must be positive, got {self.order}")

    def n_theta(self, n_y, n_u):
        return self.order * n_y * n_u

    def taps(self, theta, n_y, n_u):
        return np.asarray(theta, dtype=float).reshape(self.order, n_y, n_u)

    def simulate(self, theta, u, n_y):
        taps = self.taps(theta, n_y, u.shape[1])
        y = np.zeros((u.shape[0], n_y))
        for k in range(1, min(self.order, u.shape[0] - 1) + 1):
            y[k:] += u[:-k] @ taps[k - 1].T
        return y

    def markov(self, theta, length, n_y, n_u):
        h = np.zeros((length, n_y, n_u))
        k = min(self.order, length - 1)
        h[1 : k + 1] = self.taps(theta, n_y, n_u)[:k]
        return h

    def markov_gradient(self, theta, index, length, n_y, n_u):
        # Linear in theta: the derivative is the response of a unit parameter vector.
        unit = np.zeros(self.n_theta(n_y, n_u))
        unit[index] = 1.0
        return self.markov(unit, length, n_y, n_u)


@dataclass(frozen=True, eq=False)
class AffineMatrix:
    """Matrix whose entries are constants or +/- a single parameter."""

    base: np.ndarray
    terms: tuple = ()

    @classmethod
    def parse(cls, rows, name="matrix"):
        rows = [list(row) for row in rows]
        if not rows or any(len(row) != len(rows[0]) for row in rows):
            raise ModelError(f"{name} must be a non-empty rectangular list of rows")
        base = np.zeros((len(rows), len(rows[0])))
        terms = []
        for r, row in enumerate(rows):
            for c, entry in enumerate(row):
                if isinstance(entry, str):
                    match = _THETA_ENTRY.match(entry)
                    if not match or int(match.group(2)) < 1:
                        raise ModelError(f"{name}[{r}][{c}]: cannot parse entry {entry!r}")
                    sign = -1.0 if match.group(1) else 1.0
                    terms.append((int(match.group(2)) - 1, r, c, sign))
                else:
                    base[r, c] = float(entry)
        return cls(base, tuple(terms))

    @property
    def shape(self):
        return self.base.shape

    @property
    def n_theta(self):
        return max((index + 1 for index, *_ in self.terms), default=0)

    def evaluate(self, theta):
        m = self.base.copy()
        for index, r, c, sign in self.terms:
            m[r, c] += sign * theta[index]
        return m


@dataclass(frozen=True, eq=False)
class StateSpaceStructure(_Structure):
    """x(t+1) = A(theta) x(t) + B(theta) u(t), y(t) = C(theta) x(t)."""

    a: AffineMatrix
    b: AffineMatrix
    c: AffineMatrix
    tag = "state_space"

    def __post_init__(self):
        nx = self.a.shape[0]
        if self.a.shape != (nx, nx) or self.b.shape[0] != nx or self.c.shape[1] != nx:
            raise ModelError(
                f"inconsistent state-space shapes A{self.a.shape} B{self.b.shape} C{self.c.shape}"
            )

    def n_theta(self, n_y, n_u):
        return max(self.a.n_theta, self.b.n_theta, self.c.n_theta)

    def matrices(self, theta):
        return self.a.evaluate(theta), self.b.evaluate(theta), self.c.evaluate(theta)

    def simulate(self, theta, u, n_y, x0=None):
        a, b, c = self.matrices(theta)
        x = np.zeros(a.shape[0]) if x0 is None else np.asarray(x0, dtype=float)
        y = np.empty((u.shape[0], n_y))
        for t in range(u.shape[0]):
            y[t] = c @ x
            x = a @ x + b @ u[t]
        return y

    def markov(self, theta, length, n_y, n_u):
        a, b, c = self.matrices(theta)
        h = np.zeros((length, n_y, n_u))
        power_b = b
        for k in range(1, length):
            h[k] = c @ power_b
            power_b = a @ power_b
        return h


@dataclass(frozen=True)
class RationalStructure(_Structure):
    """SISO G = q^-nk (b_0 + b_1 q^-1 + ...) / (1 + f_1 q^-1 + ...)."""

    nb: int
    nf: int
    nk: int = 1
    tag = "rational"

    def __post_init__(self):
        if self.nb < 1 or self.nf < 0 or self.nk < 1:
            raise ModelError(f"rational structure needs nb>=1, nf>=0, nk>=1 (got {self.nb}, {self.nf}, {self.nk})")

    def n_theta(self, n_y, n_u):
        return self.nb + self.nf

    def polynomials(self, theta):
        theta = np.asarray(theta, dtype=float)
        num = np.concatenate([np.zeros(self.nk), theta[: self.nb]])
        den = np.concatenate([[1.0], theta[self.nb : self.nb + self.nf]])
        return num, den

    def simulate(self, theta, u, n_y):
        num, den = self.polynomials(theta)
        return lfilter(num, den, u[:, 0])[:, None]

    def markov(self, theta, length, n_y, n_u):
        pulse = np.zeros(length)
        pulse[0] = 1.0
        num, den = self.polynomials(theta)
        return lfilter(num, den, pulse).reshape(length, 1, 1)


@dataclass(frozen=True, eq=False)
class ParametricLtiModel:
    structure: _Structure
    theta_g: np.ndarray
    lam: np.ndarray
    n_u: int = 1
    n_y: int = 1
    theta_h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    noise_orders: tuple = (0, 0)
    name: str = ""

    def __post_init__(self):
        if self.n_u < 1 or self.n_y < 1:
            raise ModelError(f"dimensions must be positive, got n_u={self.n_u}, n_y={self.n_y}")
        if isinstance(self.structure, RationalStructure) and (self.n_u, self.n_y) != (1, 1):
            raise ModelError("rational structures are SISO")
        if isinstance(self.structure, StateSpaceStructure):
            if self.structure.b.shape[1] != self.n_u or self.structure.c.shape[0] != self.n_y:
                raise ModelError("state-space B/C shapes disagree with n_u/n_y")

        theta_g = np.atleast_1d(np.asarray(self.theta_g, dtype=float))
        expected = self.structure.n_theta(self.n_y, self.n_u)
        if theta_g.shape != (expected,):
            raise ModelError(f"{self.structure.tag} structure expects {expected} plant parameters, got {theta_g.size}")
        object.__setattr__(self, "theta_g", theta_g)

        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if lam.shape != (self.n_y, self.n_y):
            raise ModelError(f"noise covariance must be {self.n_y}x{self.n_y}, got {lam.shape}")
        if not np.allclose(lam, lam.T, atol=1e-12):
            raise ModelError("noise covariance must be symmetric")
        if np.linalg.eigvalsh(lam).min() <= 0:
            raise ModelError("noise covariance must be positive definite")
        object.__setattr__(self, "lam", lam)

        theta_h = np.atleast_1d(np.asarray(self.theta_h, dtype=float))
        nc, nd = self.noise_orders
        if theta_h.size != nc + nd:
            raise ModelError(f"noise model expects {nc + nd} parameters, got {theta_h.size}")
        object.__setattr__(self, "theta_h", theta_h)
        c_poly, d_poly = self.noise_polynomials()
        if c_poly.size > 1 and np.abs(np.roots(c_poly)).max() >= 1:
            raise ModelError("noise numerator C(q) must be minimum phase for H^-1 to be stable")
        if d_poly.size > 1 and np.abs(np.roots(d_poly)).max() >= 1:
            raise ModelError("noise denominator D(q) must be stable")

    @property
    def n_theta(self):
        return self.theta_g.size

    @property
    def has_noise_model(self):
        return self.theta_h.size > 0

    def noise_polynomials(self):
        nc, _ = self.noise_orders
        c_poly = np.concatenate([[1.0], self.theta_h[:nc]])
        d_poly = np.concatenate([[1.0], self.theta_h[nc:]])
        return c_poly, d_poly

    def inverse_noise_filter(self, signal):
        """Apply H^-1 = D/C along the time axis."""
        if not self.has_noise_model:
            return signal
        c_poly, d_poly = self.noise_polynomials()
        return lfilter(d_poly, c_poly, signal, axis=0)

    def with_lambda(self, lam):
        return ParametricLtiModel(
            self.structure, self.theta_g, lam, self.n_u, self.n_y, self.theta_h, self.noise_orders, self.name
        )


def _as_trajectory(signal, width, name):
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal[:, None]
    if signal.ndim != 2 or signal.shape[1] != width:
        raise ModelError(f"{name} must have {width} column(s), got shape {signal.shape}")
    return signal


def simulate(model, theta, u, noise=None, u_past=None, x0=None):
    """
    Simulate the model from rest (or from x0 / past inputs) and return y(1..T) as a (T, n_y) array.
    Without noise this is the noiseless response G(q, theta) u used by the output constraints.
    """
    theta = np.asarray(model.theta_g if theta is None else theta, dtype=float)
    u = _as_trajectory(u, model.n_u, "input")
    skip = 0
    if u_past is not None:
        u_past = _as_trajectory(u_past, model.n_u, "past input")
        skip = u_past.shape[0]
        u = np.vstack([u_past, u])

    with np.errstate(over="ignore", invalid="ignore"):
        if x0 is not None:
            if not isinstance(model.structure, StateSpaceStructure):
                raise ModelError("an initial state is only meaningful for state-space structures")
            y = model.structure.simulate(theta, u, model.n_y, x0=x0)
        else:
            y = model.structure.simulate(theta, u, model.n_y)

        if noise is not None:
            e = _as_trajectory(noise, model.n_y, "noise")
            if e.shape[0] != u.shape[0] - skip:
                raise ModelError(f"noise length {e.shape[0]} differs from input length {u.shape[0] - skip}")
            if model.has_noise_model:
                c_poly, d_poly = model.noise_polynomials()
                e = lfilter(c_poly, d_poly, e, axis=0)
            y[skip:] += e

    bad = ~np.isfinite(y) | (np.abs(y) > OVERFLOW_GUARD)
    if bad.any():
        sample = int(np.argmax(bad.any(axis=1)))
        raise SimulationDivergence(
            f"{model.structure.tag} model diverged at sample {sample + 1} "
            f"(|y| exceeded {OVERFLOW_GUARD:.0e}); check that theta gives a stable plant",
            sample=sample + 1,
        )
    return y[skip:]


def markov_parameters(model, theta, length):
    """Impulse response h(0..length-1) of G(q, theta), shape (length, n_y, n_u)."""
    theta = model.theta_g if theta is None else np.asarray(theta, dtype=float)
    return model.structure.markov(theta, length, model.n_y, model.n_u)


def toeplitz_matrix(response, horizon_nu):
    """
    Banded block-Toeplitz F for a truncated response f(1..n) (lags 0..n-1).
    Shape ((N_u+1) n_y, (N_u+n) n_u); block row r holds f(n)..f(1) ending at column r+n-1.
    """
    n = response.shape[0]
    rows, cols = horizon_nu + 1, horizon_nu + n
    toeplitz = np.zeros((rows * response.shape[1], cols * response.shape[2]))
    for lag in range(n):
        toeplitz += np.kron(np.eye(rows, cols, k=n - 1 - lag), response[lag])
    return toeplitz


@dataclass(frozen=True, eq=False)
class SensitivityBank:
    responses: tuple
    truncation_n: int
    horizon_nu: int
    toeplitz: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "toeplitz", tuple(toeplitz_matrix(f, self.horizon_nu) for f in self.responses))

    @property
    def n_theta(self):
        return len(self.responses)

    @property
    def n_y(self):
        return self.responses[0].shape[1]

    @property
    def n_u(self):
        return self.responses[0].shape[2]

    @property
    def past_length(self):
        return (self.truncation_n - 1) * self.n_u

    @property
    def horizon_length(self):
        return (self.horizon_nu + 1) * self.n_u

    def with_horizon(self, horizon_nu):
        return SensitivityBank(self.responses, self.truncation_n, horizon_nu)


def _suggest_truncation(energy, tolerance):
    total = energy.sum()
    tail = total - np.cumsum(energy)
    # tail[k] is the energy beyond lag k, i.e. what truncation_n = k + 1 discards
    ok = np.nonzero(tail <= tolerance * total)[0]
    return int(ok[0]) + 1 if ok.size else 2 * energy.size


def sensitivity_impulse_responses(model, theta0, n, horizon_nu=0, tail_tolerance=TAIL_TOLERANCE):
    """
    Truncated impulse responses f_i of -H^-1 dG/dtheta_i at theta0, with the
    Toeplitz matrices F_i for horizon_nu. Raises TruncationError when a response
    keeps more than tail_tolerance of its energy beyond lag n-1; the error names the
    worst response and a length that suffices for every response.
    """
    if n < 1:
        raise ModelError(f"truncation length must be positive, got {n}")
    theta0 = model.theta_g if theta0 is None else np.asarray(theta0, dtype=float)
    length = max(2 * n, n + 100)

    responses = []
    worst = None  # (tail_fraction, parameter index)
    suggested = n
    for index in range(model.n_theta):
        gradient = model.structure.markov_gradient(theta0, index, length, model.n_y, model.n_u)
        f = -model.inverse_noise_filter(gradient)
        energy = (f**2).sum(axis=(1, 2))
        total = energy.sum()
        if total > 0:
            tail_fraction = energy[n:].sum() / total
            if tail_fraction > tail_tolerance:
                suggested = max(suggested, _suggest_truncation(energy, tail_tolerance))
                if worst is None or tail_fraction > worst[0]:
                    worst = (tail_fraction, index + 1)
        responses.append(f[:n].copy())
    if worst is not None:
        raise TruncationError(worst[1], worst[0], suggested)

    logger.debug(f"Built {len(responses)} sensitivity responses with n={n}, N_u={horizon_nu}")
    return SensitivityBank(tuple(responses), n, horizon_nu)


def model_from_document(doc):
    """Build a ParametricLtiModel from a validated ModelDocument."""
    if doc.structure == "fir":
        structure = FirStructure(doc.order)
    elif doc.structure == "state_space":
        structure = StateSpaceStructure(
            AffineMatrix.parse(doc.a, "a"), AffineMatrix.parse(doc.b, "b"), AffineMatrix.parse(doc.c, "c")
        )
    else:
        structure = RationalStructure(doc.nb, doc.nf, doc.nk)

    noise_c = list(doc.noise.c) if doc.noise else []
    noise_d = list(doc.noise.d) if doc.noise else []
    return ParametricLtiModel(
        structure=structure,
        theta_g=np.asarray(doc.theta, dtype=float),
        lam=np.asarray(doc.lam, dtype=float),
        n_u=doc.n_u,
        n_y=doc.n_y,
        theta_h=np.asarray(noise_c + noise_d, dtype=float),
        noise_orders=(len(noise_c), len(noise_d)),
        name=doc.name,
    )


def load_model(path):
    text = Path(path).read_text()
    return model_from_document(ModelDocument.model_validate_json(text))
