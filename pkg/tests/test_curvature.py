import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_params
from switchgeo.alrnn import alrnn_step, itf_rollout, switching_code
from switchgeo.curvature import (CurvatureMatrix, itf_fisher, itf_sensitivities, load_matrix, param_jacobian_blocks,
                                 save_matrix, sensitivity_step)
from switchgeo.itf import itf_loss


def fd_jac(f, theta, eps):
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        cols.append((f(theta + e) - f(theta - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def test_v_blocks_at_origin():
    V = param_jacobian_blocks(np.zeros(3), 1)
    assert np.array_equal(V[:, :12], np.zeros((3, 12)))
    assert np.array_equal(V[:, 12:], np.eye(3))


def test_v_blocks_small_example():
    V = param_jacobian_blocks(np.array([3.0, -2.0]), 1)
    expect = np.array([[3, 0, 3, 0, 0, 0, 1, 0],
                       [0, -2, 0, 0, 3, 0, 0, 1]], dtype=float)
    assert np.array_equal(V, expect)


@given(st.integers(1, 5), st.data(), st.integers(0, 10_000))
def test_v_blocks_match_step_finite_differences(M, data, seed):
    P = data.draw(st.integers(1, M))
    rng = np.random.default_rng(seed)
    p = random_params(rng, M, P, 1)
    z = rng.normal(size=M)
    z[np.abs(z) < 1e-3] = 0.5  # keep away from the kink
    V = fd_jac(lambda th: alrnn_step(p.with_theta(th), z), p.theta(), 1e-6)
    assert np.allclose(V, param_jacobian_blocks(z, P), atol=1e-7)


def test_sensitivity_step_semantics(rng):
    p = random_params(rng, 3, 1, 2)
    z = rng.normal(size=3)
    c = switching_code(z, 1)
    S0 = np.zeros((3, p.p))
    assert np.array_equal(sensitivity_step(S0, p, z, c, False), param_jacobian_blocks(z, 1))
    S = rng.normal(size=(3, p.p))
    S_copy = S.copy()
    masked = S.copy()
    masked[:2] = 0
    ref = sensitivity_step(masked, p, z, c, False)
    assert np.array_equal(sensitivity_step(S, p, z, c, True), ref)
    assert np.array_equal(S, S_copy)
    assert not np.array_equal(sensitivity_step(S, p, z, c, False), ref)


@pytest.mark.parametrize("tau", [1, 2, 5])
def test_sensitivity_matches_rollout_finite_differences(rng, tau):
    p = random_params(rng, 3, 1, 2)
    x = rng.normal(size=(4, 2))
    S4 = itf_sensitivities(p, x, tau)[-1]  # observed rows of dz_4/dtheta
    fd = fd_jac(lambda th: itf_rollout(p.with_theta(th), x, tau).latents[3][:2], p.theta(), 1e-6)
    assert np.allclose(S4, fd, atol=1e-6)


def test_two_step_closed_form(rng):
    p = random_params(rng, 4, 2, 2)
    x = rng.normal(size=(2, 2))
    rec = itf_rollout(p, x, 3)
    BV = param_jacobian_blocks(rec.fed[0], 2)[:2]
    assert np.allclose(itf_fisher(p, x, 3, 0.5).entries, BV.T @ BV / 0.25, rtol=1e-13, atol=1e-14)


def test_noise_scaling(rng):
    p = random_params(rng, 4, 2, 2)
    x = rng.normal(size=(12, 2))
    F1 = itf_fisher(p, x, 4, 1.0).entries
    assert np.allclose(itf_fisher(p, x, 4, 2.0).entries, F1 / 4, rtol=1e-14)
    assert np.allclose(itf_fisher(p, x, 4, 0.3).entries, F1 / 0.09, rtol=1e-12)
    with pytest.raises(ValueError):
        itf_fisher(p, x, 4, 0.0)


def test_trace_matches_finite_difference_gauss_newton(rng):
    p = random_params(rng, 4, 2, 2)
    x = rng.normal(size=(20, 2))
    J = fd_jac(lambda th: itf_rollout(p.with_theta(th), x, 4).predictions.ravel(), p.theta(), 1e-6)
    gn = J.T @ J / (19 * 0.3 ** 2)
    F = itf_fisher(p, x, 4, 0.3)
    assert F.trace() == pytest.approx(np.trace(gn), rel=1e-4)
    assert np.allclose(F.entries, gn, rtol=1e-4, atol=1e-6 * np.abs(gn).max())


def test_full_forcing_decouples_steps(rng):
    M = N = 3
    p = random_params(rng, M, 1, N)
    x = rng.normal(size=(10, N))
    ref = sum(param_jacobian_blocks(x[t], 1).T @ param_jacobian_blocks(x[t], 1) for t in range(9)) / 9
    assert np.allclose(itf_fisher(p, x, 1, 1.0).entries, ref, rtol=1e-12, atol=1e-14)


@given(st.integers(2, 5), st.data(), st.sampled_from([1, 3, 8]), st.integers(0, 10_000))
def test_fisher_is_symmetric_psd(M, data, tau, seed):
    P = data.draw(st.integers(1, M))
    N = data.draw(st.integers(1, M))
    rng = np.random.default_rng(seed)
    p = random_params(rng, M, P, N)
    F = itf_fisher(p, rng.normal(size=(data.draw(st.integers(2, 25)), N)), tau, 0.2)
    assert np.array_equal(F.entries, F.entries.T)
    assert F.is_psd()
    assert F.per_step_normalized and F.p == M * M + 2 * M


def test_gauss_newton_is_loss_hessian_at_zero_residual(rng):
    # at zero residual the Hessian of the loss equals 2 sigma^2 times the Fisher
    from switchgeo.alrnn import free_rollout
    p = random_params(rng, 3, 1, 3, stable=True)
    x = free_rollout(p, rng.normal(size=3), 8).latents
    th = p.theta()
    eps = 1e-4
    i, j = 0, 5
    ei, ej = np.eye(th.size)[i] * eps, np.eye(th.size)[j] * eps

    def L(t):
        return itf_loss(p.with_theta(t), x, 2)

    hess = (L(th + ei + ej) - L(th + ei - ej) - L(th - ei + ej) + L(th - ei - ej)) / (4 * eps * eps)
    F = itf_fisher(p, x, 2, 1.0).entries
    assert hess == pytest.approx(2 * F[i, j], rel=1e-4, abs=1e-8)


def test_persistence_round_trip(tmp_path, rng):
    p = random_params(rng, 3, 1, 2)
    F = itf_fisher(p, rng.normal(size=(9, 2)), 2, 0.1)
    save_matrix(tmp_path / "f", F)
    G = load_matrix(tmp_path / "f")
    assert np.array_equal(G.entries, F.entries) and G.M == 3 and G.per_step_normalized
    assert G.meta["source_params_sha256"] == p.digest()
    assert G.blocks() == {"a": [0, 3], "W": [3, 12], "h": [12, 15]}
    with pytest.raises(ValueError):
        CurvatureMatrix(np.eye(4), 3)
