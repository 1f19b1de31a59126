"""Explicit-loop kernels compiled with numba.

Each kernel has a numpy twin in the module that uses it; the twins are
cross-checked in the test suite and timed against each other in
``benchmarks/bench_kernels.py``. Kernels take plain arrays and scalars only.
"""
import math

import numpy as np

from ._accel import njit


@njit
def lorenz_rk4_step(z, sigma, rho, beta, dt):
    out = np.empty(3)
    x, y, w = z[0], z[1], z[2]
    k1x = sigma * (y - x)
    k1y = x * (rho - w) - y
    k1w = x * y - beta * w
    x2, y2, w2 = x + 0.5 * dt * k1x, y + 0.5 * dt * k1y, w + 0.5 * dt * k1w
    k2x = sigma * (y2 - x2)
    k2y = x2 * (rho - w2) - y2
    k2w = x2 * y2 - beta * w2
    x3, y3, w3 = x + 0.5 * dt * k2x, y + 0.5 * dt * k2y, w + 0.5 * dt * k2w
    k3x = sigma * (y3 - x3)
    k3y = x3 * (rho - w3) - y3
    k3w = x3 * y3 - beta * w3
    x4, y4, w4 = x + dt * k3x, y + dt * k3y, w + dt * k3w
    k4x = sigma * (y4 - x4)
    k4y = x4 * (rho - w4) - y4
    k4w = x4 * y4 - beta * w4
    out[0] = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    out[1] = y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
    out[2] = w + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    return out


@njit
def lorenz_orbit(z0, n_steps, sigma, rho, beta, dt, incr):
    """Orbit of length ``n_steps`` with additive per-step increments.

    Returns ``(states, bad)`` where ``bad`` is the first non-finite index or -1.
    """
    states = np.empty((n_steps, 3))
    states[0] = z0
    for t in range(n_steps - 1):
        nxt = lorenz_rk4_step(states[t], sigma, rho, beta, dt)
        for k in range(3):
            v = nxt[k] + incr[t, k]
            if not math.isfinite(v):
                return states, t + 1
            states[t + 1, k] = v
    return states, -1


@njit
def alrnn_hard_rollout(a, W, h, n_gated, z1, n_steps, bound):
    """Hard-gated deterministic rollout; returns ``(states, n_valid)``."""
    M = a.shape[0]
    start = M - n_gated
    states = np.empty((n_steps, M))
    states[0] = z1
    phi = np.empty(M)
    for t in range(n_steps - 1):
        z = states[t]
        for i in range(M):
            if i >= start and z[i] <= 0.0:
                phi[i] = 0.0
            else:
                phi[i] = z[i]
        for i in range(M):
            acc = a[i] * z[i] + h[i]
            for j in range(M):
                acc += W[i, j] * phi[j]
            if not math.isfinite(acc) or abs(acc) > bound:
                return states, t + 1
            states[t + 1, i] = acc
    return states, n_steps


@njit
def itf_loss_grad_batch(a, W, h, E, X, tau, n_gated):
    """Mean ITF loss over the batch and its exact reverse-mode gradient.

    ``X`` has shape (B, T, N). Forcing happens at 1-based times t with
    t % tau == 0; the overwrite cuts the adjoint of the observed block.
    """
    B, T, N = X.shape
    M = a.shape[0]
    start = M - n_gated
    da = np.zeros(M)
    dW = np.zeros((M, M))
    dh = np.zeros(M)
    dE = np.zeros((M, N))
    total = 0.0
    zs = np.empty((T, M))
    zbar = np.empty((T - 1, M))
    phi = np.empty(M)
    resid = np.empty((T - 1, N))
    g = np.empty(M)
    gz = np.empty(M)
    wg = np.empty(M)
    scale = 2.0 / ((T - 1) * B)
    for b in range(B):
        for i in range(M):
            acc = 0.0
            for j in range(N):
                acc += E[i, j] * X[b, 0, j]
            zs[0, i] = acc
        for j in range(N):
            zs[0, j] = X[b, 0, j]
        for t in range(T - 1):
            forced = (t + 1) % tau == 0
            for i in range(M):
                zbar[t, i] = zs[t, i]
            if forced:
                for j in range(N):
                    zbar[t, j] = X[b, t, j]
            for i in range(M):
                v = zbar[t, i]
                phi[i] = 0.0 if (i >= start and v <= 0.0) else v
            for i in range(M):
                acc = a[i] * zbar[t, i] + h[i]
                for j in range(M):
                    acc += W[i, j] * phi[j]
                zs[t + 1, i] = acc
            for j in range(N):
                r = zs[t + 1, j] - X[b, t + 1, j]
                resid[t, j] = r
                total += r * r
        for i in range(M):
            g[i] = 0.0
        for t in range(T - 2, -1, -1):
            for j in range(N):
                g[j] += scale * resid[t, j]
            for i in range(M):
                v = zbar[t, i]
                phi[i] = 0.0 if (i >= start and v <= 0.0) else v
            for i in range(M):
                gi = g[i]
                da[i] += gi * zbar[t, i]
                dh[i] += gi
                for j in range(M):
                    dW[i, j] += gi * phi[j]
            for j in range(M):
                acc = 0.0
                for i in range(M):
                    acc += W[i, j] * g[i]
                wg[j] = acc
            for j in range(M):
                active = j < start or zbar[t, j] > 0.0
                gz[j] = a[j] * g[j] + (wg[j] if active else 0.0)
            if (t + 1) % tau == 0:
                for j in range(N):
                    gz[j] = 0.0
            for i in range(M):
                g[i] = gz[i]
        for i in range(N, M):
            for j in range(N):
                dE[i, j] += g[i] * X[b, 0, j]
    return total / ((T - 1) * B), da, dW, dh, dE


@njit
def benettin_log_r(jacobians):
    """log|R_kk| of the QR re-orthonormalization sequence, Q_0 = I."""
    n, M, _ = jacobians.shape
    Q = np.eye(M)
    out = np.empty((n, M))
    for t in range(n):
        Qn, R = np.linalg.qr(np.ascontiguousarray(jacobians[t]) @ Q)
        Q = np.ascontiguousarray(Qn)
        for k in range(M):
            out[t, k] = math.log(abs(R[k, k])) if R[k, k] != 0.0 else -math.inf
            if R[k, k] < 0.0:
                for i in range(M):
                    Q[i, k] = -Q[i, k]
    return out


@njit
def kalman_batch(m, P, F, h, q, r, N, x):
    """Per-particle Kalman predict plus Joseph update against ``x``.

    Returns ``(m', P', loglik, bad)``; ``bad`` is the first particle whose
    innovation covariance failed the Cholesky pivot test, or -1.
    """
    K_, M = m.shape
    m_new = np.empty((K_, M))
    P_new = np.empty((K_, M, M))
    ll = np.empty(K_)
    mp = np.empty(M)
    FP = np.empty((M, M))
    Pp = np.empty((M, M))
    Lc = np.zeros((N, N))
    G = np.empty((M, N))
    IKH = np.empty((M, M))
    T1 = np.empty((M, M))
    v = np.empty(N)
    w = np.empty(N)
    tmp = np.empty(N)
    log2pi = math.log(2.0 * math.pi)
    for k in range(K_):
        for i in range(M):
            acc = h[i]
            for j in range(M):
                acc += F[k, i, j] * m[k, j]
            mp[i] = acc
        for i in range(M):
            for j in range(M):
                acc = 0.0
                for l in range(M):
                    acc += F[k, i, l] * P[k, l, j]
                FP[i, j] = acc
        for i in range(M):
            for j in range(M):
                acc = 0.0
                for l in range(M):
                    acc += FP[i, l] * F[k, j, l]
                Pp[i, j] = acc
            Pp[i, i] += q
        # Cholesky of S = Pp[:N, :N] + r I
        for i in range(N):
            for j in range(i + 1):
                s = Pp[i, j] + (r if i == j else 0.0)
                for l in range(j):
                    s -= Lc[i, l] * Lc[j, l]
                if i == j:
                    if not s > 0.0:
                        return m_new, P_new, ll, k
                    Lc[i, i] = math.sqrt(s)
                else:
                    Lc[i, j] = s / Lc[j, j]
        logdet_half = 0.0
        for i in range(N):
            logdet_half += math.log(Lc[i, i])
            v[i] = x[i] - mp[i]
        # w = Lc^-1 v
        for i in range(N):
            s = v[i]
            for l in range(i):
                s -= Lc[i, l] * w[l]
            w[i] = s / Lc[i, i]
        quad = 0.0
        for i in range(N):
            quad += w[i] * w[i]
        ll[k] = -0.5 * (N * log2pi + quad) - logdet_half
        # gain rows: S G[row]^T = Pp[:N, row]
        for row in range(M):
            for i in range(N):
                s = Pp[row, i]
                for l in range(i):
                    s -= Lc[i, l] * tmp[l]
                tmp[i] = s / Lc[i, i]
            for i in range(N - 1, -1, -1):
                s = tmp[i]
                for l in range(i + 1, N):
                    s -= Lc[l, i] * G[row, l]
                G[row, i] = s / Lc[i, i]
        for i in range(M):
            acc = mp[i]
            for j in range(N):
                acc += G[i, j] * v[j]
            m_new[k, i] = acc
        for i in range(M):
            for j in range(M):
                IKH[i, j] = (1.0 if i == j else 0.0) - (G[i, j] if j < N else 0.0)
        for i in range(M):
            for j in range(M):
                acc = 0.0
                for l in range(M):
                    acc += IKH[i, l] * Pp[l, j]
                T1[i, j] = acc
        for i in range(M):
            for j in range(i + 1):
                acc = 0.0
                for l in range(M):
                    acc += T1[i, l] * IKH[j, l]
                kk = 0.0
                for l in range(N):
                    kk += G[i, l] * G[j, l]
                acc += r * kk
                P_new[k, i, j] = acc
                P_new[k, j, i] = acc
    return m_new, P_new, ll, -1
