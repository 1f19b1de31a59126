import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_params
from switchgeo import _kernels
from switchgeo._accel import USE_NUMBA
from switchgeo.alrnn import _hard_rollout_numpy
from switchgeo.dynsys import LorenzParams, _orbit_numpy
from switchgeo.itf import _loss_grad_numpy
from switchgeo.metrics import _benettin_numpy
from switchgeo.rbpf import PalrnnNoise, _kalman_step_batch_numpy, transition_matrices

pytestmark = pytest.mark.skipif(not USE_NUMBA, reason="numba kernels disabled")


def test_lorenz_orbit_twins(rng):
    lp = LorenzParams()
    incr = rng.normal(size=(499, 3)) * 0.01
    a = _kernels.lorenz_orbit(np.ones(3), 500, lp.sigma, lp.rho, lp.beta, lp.dt, incr)[0]
    b = _orbit_numpy(np.ones(3), 500, lp, incr)[0]
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_hard_rollout_twins(rng):
    p = random_params(rng, 6, 3, 2, stable=True)
    z1 = rng.normal(size=6)
    a, na = _kernels.alrnn_hard_rollout(p.a, p.W, p.h, p.P, z1, 300, 1e8)
    b, nb = _hard_rollout_numpy(p, z1, 300, 1e8)
    assert na == nb and np.allclose(a[:na], b[:nb], rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("tau", [1, 3, 16])
def test_loss_grad_twins(rng, tau):
    p = random_params(rng, 7, 3, 3)
    X = rng.normal(size=(3, 25, 3))
    a = _kernels.itf_loss_grad_batch(p.a, p.W, p.h, p.E, X, tau, p.P)
    b = _loss_grad_numpy(p.a, p.W, p.h, p.E, X, tau, p.P)
    for u, v in zip(a, b):
        assert np.allclose(u, v, rtol=1e-11, atol=1e-13)


def test_benettin_twins(rng):
    J = rng.normal(size=(200, 5, 5)) * 0.5
    assert np.allclose(_kernels.benettin_log_r(J), _benettin_numpy(J), atol=1e-11)


def test_kalman_twins(rng):
    p = random_params(rng, 5, 2, 3)
    K = 9
    m = rng.normal(size=(K, 5))
    A = rng.normal(size=(K, 5, 5))
    P = A @ np.swapaxes(A, 1, 2) * 0.1 + np.eye(5) * 0.01
    F = transition_matrices(p, rng.integers(0, 2, size=(K, 2)))
    x = rng.normal(size=3)
    noise = PalrnnNoise(0.2, 0.3, 0.5)
    q, r = noise.sigma_proc ** 2, noise.sigma_obs ** 2
    a = _kernels.kalman_batch(m, P, F, p.h, q, r, 3, x)
    b = _kalman_step_batch_numpy(m, P, F, p.h, q, r, 3, x)
    assert a[3] < 0
    for u, v in zip(a[:3], b):
        assert np.allclose(u, v, rtol=1e-11, atol=1e-13)


SCRIPT = """
import json, numpy as np
from switchgeo._accel import USE_NUMBA
from switchgeo.alrnn import AlrnnParams
from switchgeo.itf import itf_loss_grad
from switchgeo.rbpf import PalrnnNoise, rbpf_filter
rng = np.random.default_rng(0)
p = AlrnnParams(rng.uniform(.2, .6, 4), rng.normal(0, .2, (4, 4)), rng.normal(0, .1, 4), rng.normal(0, .5, (4, 2)), 2)
x = rng.normal(size=(12, 2))
g = itf_loss_grad(p, x[None], 3)
c = rbpf_filter(p, PalrnnNoise(.2, .2, .5), x, 64, .5, seed=1)
print(json.dumps({"numba": USE_NUMBA, "grad": g.tolist(), "logz": c.log_evidence}))
"""


def run_backend(flag):
    env = dict(os.environ, SWITCHGEO_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def test_environment_switch_selects_numpy_paths():
    fast, slow = run_backend("1"), run_backend("0")
    assert fast["numba"] is True and slow["numba"] is False
    assert np.allclose(fast["grad"], slow["grad"], rtol=1e-11, atol=1e-13)
    assert fast["logz"] == pytest.approx(slow["logz"], rel=1e-11)
