"""
Fisher information: Phi(u), the quadratic form, and recursive accumulation.
"""

from __future__ import annotations

import numpy as np
import pytest

from fisher import (
    DimensionError,
    InformationState,
    StackedInput,
    batch_information,
    build_phi,
    commit_step,
    fim_from_phi,
    noise_whitener,
)
from lti_core import SensitivityBank, sensitivity_impulse_responses


def brute_force_information(responses, vector, lam_inv, horizon_nu):
    """Double sum over samples and lags of psi_i(k)^T Lambda^-1 psi_j(k)."""
    n = responses[0].shape[0]
    n_u = responses[0].shape[2]
    u = vector.reshape(-1, n_u)
    n_theta = len(responses)
    info = np.zeros((n_theta, n_theta))
    for k in range(horizon_nu + 1):
        t = k + n - 1  # position of u(t + k) in the stacked vector
        psi = []
        for f in responses:
            total = np.zeros(f.shape[1])
            for lag in range(n):
                total = total + f[lag] @ u[t - lag]
            psi.append(total)
        for i in range(n_theta):
            for j in range(n_theta):
                info[i, j] += psi[i] @ lam_inv @ psi[j]
    return info


@pytest.fixture
def fir_bank(fir_model):
    return sensitivity_impulse_responses(fir_model, None, 3, horizon_nu=4)


def test_zero_input_gives_zero_phi(fir_bank):
    phi = build_phi(fir_bank, np.zeros(7), lam=1.0)
    assert phi.shape == (5, 2)
    assert not phi.any()


def test_unit_pulse_phi(fir_bank):
    u = StackedInput.for_bank(fir_bank, [0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0])
    phi = build_phi(fir_bank, u, lam=1.0)
    np.testing.assert_array_equal(phi[:, 0], [0.0, -1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(phi[:, 1], [0.0, 0.0, -1.0, 0.0, 0.0])


def test_phi_is_linear_and_information_quadratic(fir_bank, rng):
    u = rng.standard_normal(7)
    u[:2] = 0.0
    phi = build_phi(fir_bank, u, lam=1.0)
    np.testing.assert_allclose(build_phi(fir_bank, 2.5 * u, lam=1.0), 2.5 * phi, atol=1e-14)
    np.testing.assert_allclose(fim_from_phi(build_phi(fir_bank, -3.0 * u, lam=1.0)), 9.0 * fim_from_phi(phi), rtol=1e-12)


def test_whitener_scales_by_inverse_root(fir_bank):
    u = np.arange(7.0)
    np.testing.assert_allclose(build_phi(fir_bank, u, lam=4.0), 0.5 * build_phi(fir_bank, u, lam=1.0))
    w = noise_whitener([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(w @ [[2.0, 0.5], [0.5, 1.0]] @ w, np.eye(2), atol=1e-12)


def test_dimension_mismatch(fir_bank):
    with pytest.raises(DimensionError):
        build_phi(fir_bank, np.zeros(6), lam=1.0)
    with pytest.raises(DimensionError):
        StackedInput.for_bank(fir_bank, [0.0], np.zeros(5))
    with pytest.raises(DimensionError):
        noise_whitener([[1.0, 0.0], [0.0, -1.0]])


def test_zero_phi_and_zero_past():
    assert not fim_from_phi(np.zeros((5, 2)), np.zeros((2, 2))).any()


def test_constant_input_information(fir_model):
    bank = sensitivity_impulse_responses(fir_model, None, 3)
    N = 100
    info = batch_information(bank, np.full(N, 0.5), noise_whitener(1.0))
    np.testing.assert_allclose(info, 0.25 * np.array([[N - 1, N - 2], [N - 2, N - 2]]))


@pytest.mark.parametrize("instance", range(50))
def test_phi_gram_matches_brute_force(instance):
    rng = np.random.default_rng(1000 + instance)
    n_theta = int(rng.integers(1, 5))
    horizon_nu = int(rng.integers(1, 9))
    n = int(rng.integers(1, 6))
    n_y, n_u = (1, 1) if instance % 2 == 0 else (2, 2)
    responses = tuple(rng.standard_normal((n, n_y, n_u)) for _ in range(n_theta))
    bank = SensitivityBank(responses, n, horizon_nu)
    root = rng.standard_normal((n_y, n_y))
    lam = root @ root.T + n_y * np.eye(n_y)
    vector = rng.standard_normal((horizon_nu + n) * n_u)

    past = rng.standard_normal((n_theta, n_theta))
    past = past @ past.T
    fim = fim_from_phi(build_phi(bank, vector, lam=lam), past)
    expected = brute_force_information(responses, vector, np.linalg.inv(lam), horizon_nu) + past
    assert np.linalg.norm(fim - expected) <= 1e-9 * np.linalg.norm(expected)


def test_commit_zero_input_keeps_information(fir_model):
    bank = sensitivity_impulse_responses(fir_model, None, 3)
    state = InformationState.initial(2, np.eye(2))
    after = commit_step(state, bank, 0.0, [], noise_whitener(1.0))
    assert not after.i_bar_past.any()
    assert after.t == 1


def test_commit_two_constant_samples(fir_model):
    bank = sensitivity_impulse_responses(fir_model, None, 3)
    whitener = noise_whitener(2.0)
    state = InformationState.initial(2, np.eye(2))
    state = commit_step(state, bank, 0.5, [], whitener)
    state = commit_step(state, bank, 0.5, [0.5], whitener)
    assert state.i_bar_past[0, 0] == pytest.approx(0.25 / 2.0)
    assert state.i_bar_past[1, 1] == 0.0
    np.testing.assert_allclose(state.c_matrix + state.target_rhs, state.i_bar_past)


def test_recursive_matches_batch(two_tank, rng):
    bank = sensitivity_impulse_responses(two_tank, None, 20)
    whitener = noise_whitener(two_tank.lam)
    signal = rng.uniform(-0.5, 0.5, 30)
    state = InformationState.initial(4, np.zeros((4, 4)))
    for t, value in enumerate(signal):
        state = commit_step(state, bank, value, signal[:t], whitener)
    batch = batch_information(bank, signal, whitener)
    assert np.linalg.norm(state.i_bar_past - batch) <= 1e-9 * np.linalg.norm(batch)

    # the same signal as one horizon with an empty past
    wide = bank.with_horizon(len(signal) - 1)
    stacked = np.concatenate([np.zeros(wide.past_length), signal])
    oneshot = fim_from_phi(build_phi(wide, stacked, whitener=whitener))
    assert np.linalg.norm(oneshot - batch) <= 1e-9 * np.linalg.norm(batch)
    assert np.linalg.eigvalsh(batch)[0] >= -1e-10
