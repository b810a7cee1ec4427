"""
Reduced Fisher information of the plant parameters, written as a quadratic
function of the stacked input u = [past applied inputs; horizon inputs].
Only the theta_G block is formed; it is the part the input can shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    pass


def _sym(m):
    return 0.5 * (m + m.T)


def noise_whitener(lam):
    """Lambda^{-1/2} via eigendecomposition; lam must be symmetric positive definite."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if lam.shape[0] != lam.shape[1]:
        raise DimensionError(f"noise covariance must be square, got {lam.shape}")
    w, v = eigh(_sym(lam))
    if w.min() <= 0:
        raise DimensionError("noise covariance must be positive definite")
    return (v / np.sqrt(w)) @ v.T


@dataclass(frozen=True, eq=False)
class StackedInput:
    past: np.ndarray
    horizon: np.ndarray

    @classmethod
    def for_bank(cls, bank, past, horizon):
        past = np.asarray(past, dtype=float).ravel()
        horizon = np.asarray(horizon, dtype=float).ravel()
        if past.size != bank.past_length:
            raise DimensionError(f"past block needs {bank.past_length} entries, got {past.size}")
        if horizon.size != bank.horizon_length:
            raise DimensionError(f"horizon block needs {bank.horizon_length} entries, got {horizon.size}")
        return cls(past, horizon)

    @property
    def vector(self):
        return np.concatenate([self.past, self.horizon])


@dataclass(frozen=True, eq=False)
class InformationState:
    i_bar_past: np.ndarray
    c_matrix: np.ndarray
    target_rhs: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, n_theta, target_rhs):
        target_rhs = _sym(np.asarray(target_rhs, dtype=float))
        if target_rhs.shape != (n_theta, n_theta):
            raise DimensionError(f"target must be {n_theta}x{n_theta}, got {target_rhs.shape}")
        zero = np.zeros((n_theta, n_theta))
        return cls(zero, -target_rhs, target_rhs, 0)

    @property
    def n_theta(self):
        return self.i_bar_past.shape[0]

    def add(self, increment):
        i_bar = _sym(self.i_bar_past + increment)
        return InformationState(i_bar, i_bar - self.target_rhs, self.target_rhs, self.t + 1)


def build_phi(bank, u, lam=None, whitener=None):
    """
    Phi(u) = [W F_1 u, ..., W F_ntheta u] with W = I kron Lambda^{-1/2}.
    Pass either lam or a precomputed whitener.
    """
    if whitener is None:
        whitener = noise_whitener(lam)
    vector = u.vector if isinstance(u, StackedInput) else np.asarray(u, dtype=float).ravel()
    columns = bank.toeplitz[0].shape[1]
    if vector.size != columns:
        raise DimensionError(f"stacked input needs {columns} entries, got {vector.size}")
    if whitener.shape != (bank.n_y, bank.n_y):
        raise DimensionError(f"whitener must be {bank.n_y}x{bank.n_y}, got {whitener.shape}")

    outputs = np.column_stack([f @ vector for f in bank.toeplitz])
    # rows are (sample, channel) with channel fastest
    blocks = outputs.reshape(bank.horizon_nu + 1, bank.n_y, bank.n_theta)
    return np.einsum("ij,rjk->rik", whitener, blocks).reshape(-1, bank.n_theta)


def fim_from_phi(phi, past=None):
    """Ibar = Phi^T Phi + Ibar_past. past may be an InformationState, a matrix or None."""
    gram = phi.T @ phi
    if past is None:
        return _sym(gram)
    past_matrix = past.i_bar_past if isinstance(past, InformationState) else np.asarray(past, dtype=float)
    if past_matrix.shape != gram.shape:
        raise DimensionError(f"past information is {past_matrix.shape}, Phi gives {gram.shape}")
    return _sym(gram + past_matrix)


def _filtered(bank, window):
    """psi[:, i] = sum_lag f_i(lag) u(t - lag) for a window of the n most recent inputs, oldest first."""
    return np.column_stack([np.einsum("kij,kj->i", f[::-1], window) for f in bank.responses])


def commit_step(state, bank, applied_u, history, whitener):
    """
    Add the information of the newly completed sample t and advance t.
    history holds the n-1 inputs applied before applied_u, oldest first (shorter means zeros).
    """
    applied = np.asarray(applied_u, dtype=float).reshape(1, bank.n_u)
    history = np.asarray(history, dtype=float).reshape(-1, bank.n_u)
    lags = bank.truncation_n - 1
    if history.shape[0] > lags:
        history = history[-lags:] if lags else history[:0]
    pad = np.zeros((lags - history.shape[0], bank.n_u))
    window = np.vstack([pad, history, applied])

    psi = whitener @ _filtered(bank, window)
    return state.add(psi.T @ psi)


def batch_information(bank, u, whitener):
    """Information of a whole input signal applied from rest, counting outputs y(1..T)."""
    u = np.asarray(u, dtype=float).reshape(-1, bank.n_u)
    filtered = np.zeros((u.shape[0], bank.n_y, bank.n_theta))
    for i, f in enumerate(bank.responses):
        for lag in range(min(bank.truncation_n, u.shape[0])):
            filtered[lag:, :, i] += u[: u.shape[0] - lag] @ f[lag].T
    whitened = np.einsum("ij,tjk->tik", whitener, filtered).reshape(-1, bank.n_theta)
    return _sym(whitened.T @ whitened)
