"""PAL-RNN inference: Rao-Blackwellized particle filter, backward sampling, code entropy.

Each particle carries a sampled gate path and a Gaussian belief over the
latent state. Gate bits are proposed from the factorized integrated-probit
rule ``P(c_j = 1) = Phi(mu_j / sqrt(nu_j + sigma_g^2))`` under the particle's
current belief; given the bits the transition is linear-Gaussian and the
belief moves by an exact Kalman step. The weight update is the one-step
predictive likelihood of the next observation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

from . import _io, _kernels
from ._accel import USE_NUMBA
from .alrnn import AlrnnParams, embed_init, gate_vector
from .errors import NumericalError
from .rng import as_rng

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PalrnnNoise:
    sigma_proc: float
    sigma_obs: float
    sigma_g: float

    def __post_init__(self):
        for name in ("sigma_proc", "sigma_obs", "sigma_g"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.sigma_proc > 0 and self.sigma_obs > 0 and self.sigma_g > 0):
            raise ValueError("PAL-RNN noise scales must be strictly positive")

    def to_json(self) -> dict:
        return {"sigma_proc": self.sigma_proc, "sigma_obs": self.sigma_obs, "sigma_g": self.sigma_g}


def integrated_probit_prob(mu, nu, sigma_g):
    return ndtr(np.asarray(mu) / np.sqrt(np.asarray(nu) + sigma_g ** 2))


def integrated_probit_logprob(mu, nu, sigma_g):
    """``(log P(c=1), log P(c=0))`` computed stably."""
    u = np.asarray(mu) / np.sqrt(np.asarray(nu) + sigma_g ** 2)
    return log_ndtr(u), log_ndtr(-u)


def initial_belief(params: AlrnnParams, noise: PalrnnNoise, x0):
    """Mean ``embed_init(x0)``; covariance sigma_obs^2 on the observed block, sigma_proc^2 elsewhere."""
    var = np.full(params.M, noise.sigma_proc ** 2)
    var[:params.N] = noise.sigma_obs ** 2
    return embed_init(params, x0), np.diag(var)


def transition_matrices(params: AlrnnParams, codes):
    """``F = A + W D(c)`` for a batch of codes (K, P) -> (K, M, M)."""
    d = gate_vector(codes, params.M)
    return np.diag(params.a) + params.W[None] * d[:, None, :]


KALMAN_NUMBA_MAX_M = 16


def kalman_step_batch(m, P, F, params: AlrnnParams, noise: PalrnnNoise, x_next):
    """Predict with ``F`` and ``Q``, Joseph-form update against ``x_next``.

    Returns ``(m', P', loglik)`` with ``loglik = log N(x_next; B m-, B P- B^T + R)``.
    """
    q, r = noise.sigma_proc ** 2, noise.sigma_obs ** 2
    # per-particle loops beat batched BLAS only for small latent sizes (see benchmarks/)
    if USE_NUMBA and params.M <= KALMAN_NUMBA_MAX_M:
        m_new, P_new, ll, bad = _kernels.kalman_batch(np.ascontiguousarray(m, dtype=float),
                                                      np.ascontiguousarray(P, dtype=float),
                                                      np.ascontiguousarray(F, dtype=float), params.h, q, r,
                                                      params.N, np.asarray(x_next, dtype=float))
        if bad >= 0:
            raise NumericalError("innovation covariance not positive definite", module="palrnn_infer")
        return m_new, P_new, ll
    return _kalman_step_batch_numpy(m, P, F, params.h, q, r, params.N, x_next)


def _kalman_step_batch_numpy(m, P, F, h, q, r, N, x_next):
    M = m.shape[1]
    m_pred = np.einsum("kij,kj->ki", F, m) + h
    P_pred = F @ P @ np.swapaxes(F, 1, 2)
    P_pred[:, np.arange(M), np.arange(M)] += q
    S = P_pred[:, :N, :N] + r * np.eye(N)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance not positive definite", module="palrnn_infer") from exc
    v = x_next - m_pred[:, :N]
    # K = P_pred[:, :, :N] S^-1 via the Cholesky factor
    U = np.linalg.solve(L, np.swapaxes(P_pred[:, :, :N], 1, 2))
    K = np.swapaxes(np.linalg.solve(np.swapaxes(L, 1, 2), U), 1, 2)
    w = np.linalg.solve(L, v[..., None])[..., 0]
    loglik = -0.5 * (N * LOG_2PI + np.sum(w * w, axis=1)) - np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    m_new = m_pred + np.einsum("kin,kn->ki", K, v)
    IKH = np.broadcast_to(np.eye(M), F.shape).copy()
    IKH[:, :, :N] -= K
    P_new = IKH @ P_pred @ np.swapaxes(IKH, 1, 2) + r * K @ np.swapaxes(K, 1, 2)
    P_new = 0.5 * (P_new + np.swapaxes(P_new, 1, 2))
    return m_new, P_new, loglik


def kalman_step(belief, code, params: AlrnnParams, noise: PalrnnNoise, x_next):
    m, P = belief
    F = transition_matrices(params, np.atleast_2d(code))
    m1, P1, ll = kalman_step_batch(np.asarray(m, float)[None], np.asarray(P, float)[None], F, params, noise,
                                   np.asarray(x_next, float))
    return (m1[0], P1[0]), float(ll[0])


def normalize_log_weights(log_w):
    log_w = np.asarray(log_w, dtype=float)
    tot = logsumexp(log_w)
    if not np.isfinite(tot):
        raise NumericalError("total weight degeneracy", module="palrnn_infer")
    return log_w - tot


def ess(log_weights) -> float:
    lw = normalize_log_weights(log_weights)
    return float(np.exp(-logsumexp(2.0 * lw)))


def multinomial_resample(weights, n: int, rng) -> np.ndarray:
    """``n`` i.i.d. categorical draws from normalized ``weights``."""
    cdf = np.cumsum(np.asarray(weights, dtype=float))
    cdf /= cdf[-1]
    u = as_rng(rng, "resample").random(n)
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def encode_codes(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return codes @ (1 << np.arange(codes.shape[-1], dtype=np.int64))


def code_entropy_nats(codes, log_weights, mode: str = "full") -> float:
    """Entropy of the weighted empirical code distribution, ``0 log 0 = 0``."""
    w = np.exp(normalize_log_weights(log_weights))
    if mode == "full":
        keys, inv = np.unique(encode_codes(codes), return_inverse=True)
        p = np.bincount(inv.ravel(), weights=w, minlength=keys.size)
        p = p[p > 0]
        # a single surviving code can sum to 1 + ulp; clamp the rounding below zero
        return max(float(-np.sum(p * np.log(p))), 0.0)
    if mode == "bit":
        q = np.clip(w @ np.asarray(codes, dtype=float), 0.0, 1.0)
        ent = np.zeros_like(q)
        for part in (q, 1.0 - q):
            nz = part > 0
            ent[nz] -= part[nz] * np.log(part[nz])
        return float(ent.sum())
    raise ValueError(f"unknown entropy mode {mode!r}")


@dataclass
class ParticleCloud:
    """Filtering record over one window.

    ``codes[s, i]`` is the bit pattern particle ``i`` used for transition
    ``s -> s+1`` (indexed before any resampling at step ``s``);
    ``ancestors[s, k]`` is the pre-resampling index that post-resampling
    particle ``k`` descends from (identity when no resampling happened).
    """

    means: np.ndarray
    covs: np.ndarray
    log_weights: np.ndarray
    codes: np.ndarray
    ancestors: np.ndarray
    step_log_weights: np.ndarray
    resampled: np.ndarray
    ess: np.ndarray
    entropy_bits: np.ndarray
    logz_increments: np.ndarray
    x_window: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return self.log_weights.shape[0]

    @property
    def L(self) -> int:
        return self.codes.shape[0]

    @property
    def log_evidence(self) -> float:
        return float(np.sum(self.logz_increments))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def diagnostics_rows(self):
        return [(s + 1, self.ess[s] / self.n_particles, bool(self.resampled[s]), self.entropy_bits[s],
                 self.logz_increments[s]) for s in range(self.L)]

    def write_diagnostics(self, path):
        return _io.write_csv(path, ["t", "ess_normalized", "resampled_flag", "entropy_bits", "logZ_increment"],
                             self.diagnostics_rows())


def rbpf_filter(params: AlrnnParams, noise: PalrnnNoise, x_window, n_particles: int = 256,
                tau_ess: float = 0.5, seed=0) -> ParticleCloud:
    """Filter ``x_window[1:]`` conditional on the boundary observation ``x_window[0]``."""
    x = np.asarray(x_window, dtype=float)
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] != params.N:
        raise ValueError("x_window must be (L+1, N) with L >= 1")
    rng = as_rng(seed, "rbpf")
    Np, M, P, L = n_particles, params.M, params.P, x.shape[0] - 1
    gated = np.arange(M - P, M)
    m0, P0 = initial_belief(params, noise, x[0])
    m = np.broadcast_to(m0, (Np, M)).copy()
    cov = np.broadcast_to(P0, (Np, M, M)).copy()
    log_w = np.full(Np, -np.log(Np))
    codes = np.empty((L, Np, P), dtype=np.int8)
    anc = np.empty((L, Np), dtype=np.int64)
    step_lw = np.empty((L, Np))
    resampled = np.zeros(L, dtype=bool)
    ess_trace = np.empty(L)
    ent = np.empty(L)
    incr = np.empty(L)
    for s in range(L):
        prob = integrated_probit_prob(m[:, gated], cov[:, gated, gated], noise.sigma_g)
        c = (rng.random((Np, P)) < prob).astype(np.int8)
        m, cov, ll = kalman_step_batch(m, cov, transition_matrices(params, c), params, noise, x[s + 1])
        codes[s] = c
        joint = log_w + ll
        tot = logsumexp(joint)
        if not np.isfinite(tot):
            raise NumericalError("total weight degeneracy", module="palrnn_infer", index=s + 1)
        incr[s] = tot
        log_w = joint - tot
        step_lw[s] = log_w
        ent[s] = code_entropy_nats(c, log_w) / np.log(2.0)
        ess_trace[s] = float(np.exp(-logsumexp(2.0 * log_w)))
        if ess_trace[s] < tau_ess * Np:
            idx = multinomial_resample(np.exp(log_w), Np, rng)
            m, cov = m[idx], cov[idx]
            log_w = np.full(Np, -np.log(Np))
            anc[s] = idx
            resampled[s] = True
        else:
            anc[s] = np.arange(Np)
    meta = {"n_particles": int(Np), "tau_ess": float(tau_ess), "noise": noise.to_json(),
            "params_sha256": params.digest()}
    return ParticleCloud(m, cov, log_w, codes, anc, step_lw, resampled, ess_trace, ent, incr, x, meta)


def filtering_code_entropy(cloud: ParticleCloud, mode: str = "full"):
    """Per-step filtering code entropies and their time average, in bits."""
    if mode == "full":
        per = cloud.entropy_bits.copy()
    else:
        per = np.array([code_entropy_nats(cloud.codes[s], cloud.step_log_weights[s], mode)
                        for s in range(cloud.L)]) / np.log(2.0)
    return per, float(per.mean())


@dataclass
class SmoothedDraw:
    codes: np.ndarray
    states: np.ndarray


def trace_code_path(cloud: ParticleCloud, k: int) -> np.ndarray:
    path = np.empty((cloud.L, cloud.codes.shape[2]), dtype=np.int8)
    for s in range(cloud.L - 1, -1, -1):
        k = cloud.ancestors[s, k]
        path[s] = cloud.codes[s, k]
    return path


def kalman_filter_paths(params: AlrnnParams, noise: PalrnnNoise, x_window, code_paths):
    """Filter a batch of fixed code paths (K, L, P) jointly.

    Returns means (L+1, K, M), covariances (L+1, K, M, M), transition
    matrices (L, K, M, M) and per-path total log-likelihoods (K,).
    """
    x = np.asarray(x_window, dtype=float)
    paths = np.asarray(code_paths)
    K, L = paths.shape[0], x.shape[0] - 1
    M = params.M
    m0, P0 = initial_belief(params, noise, x[0])
    ms, Ps = np.empty((L + 1, K, M)), np.empty((L + 1, K, M, M))
    ms[0], Ps[0] = m0, P0
    F = np.stack([transition_matrices(params, paths[:, s]) for s in range(L)])
    total = np.zeros(K)
    for s in range(L):
        ms[s + 1], Ps[s + 1], ll = kalman_step_batch(ms[s], Ps[s], F[s], params, noise, x[s + 1])
        total += ll
    return ms, Ps, F, total


def kalman_filter_path(params: AlrnnParams, noise: PalrnnNoise, x_window, code_path):
    """Filtered means/covariances along one code path, plus its total log-likelihood."""
    x = np.asarray(x_window, dtype=float)
    path = np.asarray(code_path).reshape(x.shape[0] - 1, -1)
    ms, Ps, F, total = kalman_filter_paths(params, noise, x, path[None])
    return ms[:, 0], Ps[:, 0], F[:, 0], float(total[0])


def _sample_mvn_batch(mean, cov, rng):
    """Draws from N(mean_k, cov_k); eigen square roots tolerate singular covariances."""
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    vals, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))[:, None, :]
    return mean + np.einsum("kij,kj->ki", root, rng.standard_normal(mean.shape))


def backward_sample(cloud: ParticleCloud, params: AlrnnParams, noise: PalrnnNoise, n_draws: int,
                    seed=0) -> list[SmoothedDraw]:
    """Terminal particle by weight, ancestral gate path, then a backward state draw given that path.

    Distinct gate paths are re-filtered once each from the initial belief.
    """
    rng = as_rng(seed, "backward")
    picks = multinomial_resample(cloud.weights, n_draws, rng)
    paths = np.stack([trace_code_path(cloud, int(k)) for k in picks])
    uniq, which = np.unique(paths.reshape(n_draws, -1), axis=0, return_inverse=True)
    which = np.asarray(which).ravel()
    L, M = cloud.L, params.M
    ms, Ps, F, _ = kalman_filter_paths(params, noise, cloud.x_window, uniq.reshape(-1, L, paths.shape[2]))
    ms, Ps, F = ms[:, which], Ps[:, which], F[:, which]
    q = noise.sigma_proc ** 2
    z = np.empty((L + 1, n_draws, M))
    z[L] = _sample_mvn_batch(ms[L], Ps[L], rng)
    eye = np.eye(M)
    for s in range(L - 1, -1, -1):
        FP = F[s] @ Ps[s]
        pred = FP @ np.swapaxes(F[s], 1, 2) + q * eye
        G = np.swapaxes(np.linalg.solve(pred, FP), 1, 2)
        resid = z[s + 1] - np.einsum("kij,kj->ki", F[s], ms[s]) - params.h
        mean = ms[s] + np.einsum("kij,kj->ki", G, resid)
        cov = Ps[s] - G @ FP
        z[s] = _sample_mvn_batch(mean, cov, rng)
    return [SmoothedDraw(paths[d].copy(), z[:, d].copy()) for d in range(n_draws)]


def rts_smoother(params: AlrnnParams, noise: PalrnnNoise, x_window, code_path):
    """Exact smoothed marginals for a fixed code path (Rauch-Tung-Striebel)."""
    ms, Ps, F, _ = kalman_filter_path(params, noise, x_window, code_path)
    q = noise.sigma_proc ** 2
    L, M = ms.shape[0] - 1, params.M
    mu, Sig = ms.copy(), Ps.copy()
    for s in range(L - 1, -1, -1):
        pred_m = F[s] @ ms[s] + params.h
        pred_P = F[s] @ Ps[s] @ F[s].T + q * np.eye(M)
        G = np.linalg.solve(pred_P, F[s] @ Ps[s]).T
        mu[s] = ms[s] + G @ (mu[s + 1] - pred_m)
        Sig[s] = Ps[s] + G @ (Sig[s + 1] - pred_P) @ G.T
    return mu, Sig


def simulate_palrnn(params: AlrnnParams, noise: PalrnnNoise, T: int, z1=None, seed=0):
    """Sample ``(states, codes, observations)`` from the PAL-RNN generative model."""
    rng = as_rng(seed, "palrnn_sim")
    M, P, N = params.M, params.P, params.N
    z = np.empty((T, M))
    codes = np.empty((T - 1, P), dtype=np.int8)
    z[0] = np.zeros(M) if z1 is None else z1
    for t in range(T - 1):
        c = (rng.random(P) < ndtr(z[t, M - P:] / noise.sigma_g)).astype(np.int8)
        F = transition_matrices(params, c[None])[0]
        z[t + 1] = F @ z[t] + params.h + noise.sigma_proc * rng.standard_normal(M)
        codes[t] = c
    x = z[:, :N] + noise.sigma_obs * rng.standard_normal((T, N))
    return z, codes, x
