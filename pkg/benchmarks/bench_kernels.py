#!/usr/bin/env python3
"""Numba kernels against their numpy twins: agreement check plus best-of-n wall time.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from switchgeo import _kernels
from switchgeo.alrnn import _hard_rollout_numpy
from switchgeo.dynsys import LorenzParams, _orbit_numpy
from switchgeo.itf import _loss_grad_numpy, init_params
from switchgeo.metrics import _benettin_numpy
from switchgeo.rbpf import _kalman_step_batch_numpy


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def cases():
    rng = np.random.default_rng(0)
    lp = LorenzParams()
    n = 20_000
    incr = np.zeros((n - 1, 3))
    z0 = np.ones(3)
    yield ("lorenz_orbit T=2e4",
           lambda: _kernels.lorenz_orbit(z0, n, lp.sigma, lp.rho, lp.beta, lp.dt, incr)[0],
           lambda: _orbit_numpy(z0, n, lp, incr)[0])

    p = init_params(0, 30, 10, 3)
    z1 = rng.standard_normal(30) * 0.1
    yield ("alrnn_hard_rollout M=30 T=1e4",
           lambda: _kernels.alrnn_hard_rollout(p.a, p.W, p.h, p.P, z1, 10_000, 1e8)[0],
           lambda: _hard_rollout_numpy(p, z1, 10_000, 1e8)[0])

    X = rng.standard_normal((16, 200, 3))
    args = (p.a, p.W, p.h, p.E, X, 16, p.P)
    yield ("itf_loss_grad B=16 L=200 M=30",
           lambda: _kernels.itf_loss_grad_batch(*args),
           lambda: _loss_grad_numpy(*args))

    J = rng.standard_normal((5000, 8, 8)) * 0.4
    yield ("benettin n=5000 M=8",
           lambda: _kernels.benettin_log_r(J),
           lambda: _benettin_numpy(J))

    # the RBPF only dispatches to numba up to rbpf.KALMAN_NUMBA_MAX_M
    for M in (6, 30):
        K, N = 256, 3
        m = rng.standard_normal((K, M))
        A = rng.standard_normal((K, M, M)) * 0.1
        P = np.einsum("kij,klj->kil", A, A) + 0.05 * np.eye(M)
        F = np.eye(M) * 0.9 + rng.standard_normal((K, M, M)) * 0.05
        h = rng.standard_normal(M) * 0.1
        x = rng.standard_normal(N)
        yield (f"kalman_batch Np=256 M={M}",
               lambda m=m, P=P, F=F, h=h, x=x: _kernels.kalman_batch(m, P, F, h, 0.01, 0.01, N, x)[:3],
               lambda m=m, P=P, F=F, h=h, x=x: _kalman_step_batch_numpy(m, P, F, h, 0.01, 0.01, N, x)[:3])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fast, slow in cases():
        tf, a = best_of(fast, args.repeat)
        ts, b = best_of(slow, args.repeat)
        print(f"{name:34s} {tf * 1e3:10.3f} {ts * 1e3:10.3f} {ts / tf:8.1f} {max_diff(a, b):11.3g}")


if __name__ == "__main__":
    main()
