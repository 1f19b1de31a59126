"""Louis-identity observed information, exact enumeration oracles and the two-regime AR(1) toy.

For a fixed gate path the PAL-RNN transition mean is linear in
``theta = [a; vec(W); h]``: ``mean_t = G_t theta`` with
``G_t = [diag(z_t) | I kron (D(c_t) z_t)^T | I]``. Complete-data scores and
information therefore have closed forms; gating and observation terms carry no
``theta`` dependence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_ndtr, logsumexp

from .alrnn import AlrnnParams, gate_vector
from .curvature import CurvatureMatrix, symmetrize
from .rbpf import (PalrnnNoise, SmoothedDraw, backward_sample, initial_belief, integrated_probit_logprob,
                   kalman_step_batch, rbpf_filter, transition_matrices)
from .rng import substream

ENUM_BUDGET = 20


def _gated_inputs(draw: SmoothedDraw, params: AlrnnParams):
    z = np.asarray(draw.states, dtype=float)
    codes = np.asarray(draw.codes)
    if z.shape[1] != params.M or codes.shape[1] != params.P or z.shape[0] != codes.shape[0] + 1:
        raise ValueError("draw dimensions do not match the model")
    return z[:-1], gate_vector(codes, params.M) * z[:-1], z[1:]


def complete_data_score(draw: SmoothedDraw, params: AlrnnParams, noise: PalrnnNoise) -> np.ndarray:
    z, u, z_next = _gated_inputs(draw, params)
    r = z_next - params.a * z - u @ params.W.T - params.h
    q = noise.sigma_proc ** 2
    return np.concatenate([np.sum(z * r, axis=0), (r.T @ u).ravel(), r.sum(axis=0)]) / q


def complete_data_info(draw: SmoothedDraw, params: AlrnnParams, noise: PalrnnNoise) -> CurvatureMatrix:
    """``sum_t G_t^T Q^-1 G_t`` assembled block-wise from state moments."""
    z, u, _ = _gated_inputs(draw, params)
    M = params.M
    n = z.shape[0]
    ia, iw, ih = slice(0, M), slice(M, M + M * M), slice(M + M * M, M * M + 2 * M)
    I = np.zeros((params.p, params.p))
    I[ia, ia] = np.diag(np.sum(z * z, axis=0))
    zu = z.T @ u
    aW = np.zeros((M, M * M))
    for i in range(M):
        aW[i, i * M:(i + 1) * M] = zu[i]
    I[ia, iw] = aW
    I[iw, ia] = aW.T
    I[ia, ih] = I[ih, ia] = np.diag(z.sum(axis=0))
    I[iw, iw] = np.kron(np.eye(M), u.T @ u)
    Wh = np.kron(np.eye(M), u.sum(axis=0)[:, None])
    I[iw, ih] = Wh
    I[ih, iw] = Wh.T
    I[ih, ih] = n * np.eye(M)
    return CurvatureMatrix(I / noise.sigma_proc ** 2, M, False)


@dataclass
class LouisEstimate:
    I_obs: CurvatureMatrix
    E_I_comp: CurvatureMatrix
    I_miss: CurvatureMatrix
    n_draws: int
    T: int
    meta: dict = field(default_factory=dict)


def louis_observed_info(draws, params: AlrnnParams, noise: PalrnnNoise) -> LouisEstimate:
    """Empirical complete-data information minus the empirical score covariance (n-1 denominator)."""
    if len(draws) < 2:
        raise ValueError("need at least 2 draws for the score covariance")
    scores = np.stack([complete_data_score(d, params, noise) for d in draws])
    e_comp = symmetrize(np.mean([complete_data_info(d, params, noise).entries for d in draws], axis=0))
    miss = symmetrize(np.cov(scores, rowvar=False, ddof=1))
    obs = e_comp - miss
    T = draws[0].states.shape[0]
    M = params.M
    return LouisEstimate(CurvatureMatrix(obs, M), CurvatureMatrix(e_comp, M), CurvatureMatrix(miss, M),
                         len(draws), T, {"score_mean": scores.mean(axis=0)})


def rbpf_louis(params: AlrnnParams, noise: PalrnnNoise, x_window, n_particles: int = 256, n_draws: int = 8,
               tau_ess: float = 0.5, seed=0):
    """Filter, trace and smooth one window, then apply the Louis estimator. Returns ``(estimate, cloud)``."""
    cloud = rbpf_filter(params, noise, x_window, n_particles, tau_ess, substream(seed, "louis", "filter"))
    draws = backward_sample(cloud, params, noise, n_draws, substream(seed, "louis", "smooth"))
    est = louis_observed_info(draws, params, noise)
    est.meta.update(log_evidence=cloud.log_evidence, n_particles=int(n_particles))
    return est, cloud


def mir(estimate: LouisEstimate, return_flag: bool = False):
    """``1 - tr(I_obs) / tr(E[I_comp])``; with ``return_flag`` also report whether MC noise made it negative."""
    denom = estimate.E_I_comp.trace()
    if denom == 0:
        raise ValueError("complete-data information has zero trace")
    value = 1.0 - estimate.I_obs.trace() / denom
    return (value, value < 0) if return_flag else value


def enumerate_marginal_loglik(params: AlrnnParams, noise: PalrnnNoise, x_window,
                              gate_params: AlrnnParams | None = None) -> float:
    """Exact log-evidence of a window by summing over every gate path.

    At each step each branch multiplies in its integrated-probit gate
    probability and its Kalman predictive likelihood. With ``gate_params``
    the gate probabilities are computed from beliefs under those parameters
    (held fixed) while the likelihood terms use ``params``; differentiating
    that version in ``params`` gives the target of the Louis estimator.
    """
    x = np.asarray(x_window, dtype=float)
    L, P, M = x.shape[0] - 1, params.P, params.M
    if P * L > ENUM_BUDGET:
        raise ValueError(f"enumeration budget exceeded: P*L = {P * L} > {ENUM_BUDGET}")
    gated = np.arange(M - P, M)
    all_codes = ((np.arange(2 ** P)[:, None] >> np.arange(P)) & 1).astype(np.int8)
    n_codes = all_codes.shape[0]
    m0, P0 = initial_belief(params, noise, x[0])
    m, cov = m0[None], P0[None]
    split = gate_params is not None
    if split:
        gm0, gP0 = initial_belief(gate_params, noise, x[0])
        gm, gcov = gm0[None], gP0[None]
    else:
        gm, gcov = m, cov
    log_w = np.zeros(1)
    for s in range(L):
        lp1, lp0 = integrated_probit_logprob(gm[:, gated], gcov[:, gated, gated], noise.sigma_g)
        lgp = lp1 @ all_codes.T + lp0 @ (1 - all_codes).T
        K = m.shape[0]
        codes = np.tile(all_codes, (K, 1))
        m, cov, ll = kalman_step_batch(np.repeat(m, n_codes, axis=0), np.repeat(cov, n_codes, axis=0),
                                       transition_matrices(params, codes), params, noise, x[s + 1])
        if split:
            gm, gcov, _ = kalman_step_batch(np.repeat(gm, n_codes, axis=0), np.repeat(gcov, n_codes, axis=0),
                                            transition_matrices(gate_params, codes), gate_params, noise, x[s + 1])
        else:
            gm, gcov = m, cov
        log_w = (log_w[:, None] + lgp).ravel() + ll
    return float(logsumexp(log_w))


def fd_hessian(f, x0, step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    H = np.empty((n, n))
    f0 = f(x0)
    E = np.eye(n) * step
    for i in range(n):
        H[i, i] = (f(x0 + E[i]) - 2 * f0 + f(x0 - E[i])) / step ** 2
        for j in range(i):
            H[i, j] = H[j, i] = (f(x0 + E[i] + E[j]) - f(x0 + E[i] - E[j]) - f(x0 - E[i] + E[j])
                                 + f(x0 - E[i] - E[j])) / (4 * step ** 2)
    return H


def enumerated_observed_info(params: AlrnnParams, noise: PalrnnNoise, x_window, step: float = 1e-4):
    """Negative finite-difference Hessian in ``theta`` of the gate-frozen enumerated marginal."""
    def f(theta):
        return enumerate_marginal_loglik(params.with_theta(theta), noise, x_window, gate_params=params)
    return -symmetrize(fd_hessian(f, params.theta(), step))


# two-regime scalar AR(1) toy

@dataclass(frozen=True)
class ToyModel:
    a0: float = 0.90
    a1: float = 0.60
    sigma: float = 0.15
    sigma_g: float = 0.1

    def __post_init__(self):
        if not (self.sigma > 0 and self.sigma_g > 0):
            raise ValueError("sigma and sigma_g must be positive")


def toy_simulate(model: ToyModel, T: int, seed=0) -> np.ndarray:
    """Gate ``c_t ~ Bernoulli(Phi(x_t / sigma_g))`` picks ``a_{c_t}``; ``x_1`` from the stationary law of regime 0.

    Random numbers depend on ``seed`` only, so sweeps over ``sigma_g`` share them.
    """
    rng = substream(seed, "toy")
    x = np.empty(T)
    x[0] = model.sigma / np.sqrt(1 - model.a0 ** 2) * rng.standard_normal()
    u = rng.random(T - 1)
    eps = rng.standard_normal(T - 1)
    for t in range(T - 1):
        on = np.log(u[t]) < log_ndtr(x[t] / model.sigma_g)
        x[t + 1] = (model.a1 if on else model.a0) * x[t] + model.sigma * eps[t]
    return x


def _toy_log_lik(x_t, x_next, a, sigma):
    r = x_next - a * x_t
    return -0.5 * (r / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)


def toy_gate_posterior(x_t, x_next, model: ToyModel):
    """``P(c_t = 1 | x_t, x_{t+1})`` with prior ``Phi(x_t / sigma_g)``."""
    u = np.asarray(x_t, dtype=float) / model.sigma_g
    logit = (log_ndtr(u) + _toy_log_lik(x_t, x_next, model.a1, model.sigma)
             - log_ndtr(-u) - _toy_log_lik(x_t, x_next, model.a0, model.sigma))
    return expit(logit)


def toy_marginal_loglik(x, a0, a1, model: ToyModel) -> float:
    """Exact log-likelihood of the gate-marginalized toy series at coefficients ``(a0, a1)``."""
    x = np.asarray(x, dtype=float)
    u = x[:-1] / model.sigma_g
    terms = np.logaddexp(log_ndtr(-u) + _toy_log_lik(x[:-1], x[1:], a0, model.sigma),
                         log_ndtr(u) + _toy_log_lik(x[:-1], x[1:], a1, model.sigma))
    return float(terms.sum())


@dataclass
class ToyLouisResult:
    I_obs: np.ndarray
    E_I_comp: np.ndarray
    I_miss: np.ndarray
    gate_posterior: np.ndarray
    mean_entropy_bits: float
    mir: float


def _bernoulli_entropy_bits(p):
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    for part in (p, 1.0 - p):
        nz = part > 0
        out[nz] -= part[nz] * np.log2(part[nz])
    return out


def toy_louis(x_series, model: ToyModel) -> ToyLouisResult:
    """Closed-form observed information over ``(a0, a1)``, summed over time."""
    x = np.asarray(x_series, dtype=float)
    if x.size < 2:
        raise ValueError("series must have at least 2 points")
    xt, xn = x[:-1], x[1:]
    p = toy_gate_posterior(xt, xn, model)
    s2 = model.sigma ** 2
    info = xt * xt / s2
    comp = np.diag([np.sum((1 - p) * info), np.sum(p * info)])
    d = np.stack([-(xn - model.a0 * xt) * xt / s2, (xn - model.a1 * xt) * xt / s2], axis=1)
    miss = (d * (p * (1 - p))[:, None]).T @ d
    obs = comp - miss
    return ToyLouisResult(obs, comp, miss, p, float(_bernoulli_entropy_bits(p).mean()),
                          float(1.0 - np.trace(obs) / np.trace(comp)))


def default_sigma_g_grid():
    return np.logspace(np.log10(0.03), np.log10(0.9), 25)


@dataclass(frozen=True)
class ToySweepConfig:
    a0: float = 0.90
    a1: float = 0.60
    sigma: float = 0.15
    T: int = 600
    n_seeds: int = 20
    sigma_g: tuple | None = None
    seed: int = 0

    def grid(self) -> np.ndarray:
        return default_sigma_g_grid() if self.sigma_g is None else np.asarray(self.sigma_g, dtype=float)


@dataclass
class ToySweepResult:
    rows: list
    summary: list

    COLUMNS = ("sigma_g", "seed", "mean_entropy_bits", "mir", "log10_tr_iobs")
    SUMMARY_COLUMNS = ("sigma_g", "entropy_mean", "entropy_sem", "mir_mean", "mir_sem",
                       "log10_tr_mean", "log10_tr_sem")

    def column(self, name) -> np.ndarray:
        k = self.SUMMARY_COLUMNS.index(name)
        return np.array([r[k] for r in self.summary])


def toy_experiment(config: ToySweepConfig = ToySweepConfig()) -> ToySweepResult:
    rows, summary = [], []
    for sg in config.grid():
        model = ToyModel(config.a0, config.a1, config.sigma, float(sg))
        vals = []
        for k in range(config.n_seeds):
            x = toy_simulate(model, config.T, seed=f"{config.seed}/{k}")
            res = toy_louis(x, model)
            row = (float(sg), k, res.mean_entropy_bits, res.mir, float(np.log10(np.trace(res.I_obs))))
            rows.append(row)
            vals.append(row[2:])
        vals = np.asarray(vals)
        sem = vals.std(axis=0, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.zeros(3)
        mean = vals.mean(axis=0)
        summary.append((float(sg), mean[0], sem[0], mean[1], sem[1], mean[2], sem[2]))
    return ToySweepResult(rows, summary)
