"""Dynamical QoIs (state-space divergence, Lyapunov spectrum) and curvature-mismatch diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from . import _kernels
from ._accel import USE_NUMBA
from .alrnn import AlrnnParams, embed_init, free_rollout, step_jacobian
from .curvature import CurvatureMatrix, symmetrize
from .errors import DivergenceError
from .rng import substream

LAMBDA1_LORENZ = 0.9056


def _hist(points, lo, width, n_bins):
    idx = np.floor((points - lo) / width * n_bins).astype(np.int64)
    np.clip(idx, 0, n_bins - 1, out=idx)
    flat = np.ravel_multi_index(tuple(idx.T), (n_bins,) * points.shape[1])
    return np.bincount(flat, minlength=n_bins ** points.shape[1]).astype(float)


def d_stsp(gen, ref, n_bins: int = 30, alpha_smooth: float = 1e-5) -> float:
    """KL(p_gen || q_ref) of Laplace-smoothed joint occupancy histograms.

    The box is the per-dimension min/max of ``ref``; generated points outside
    it fall into the edge bins. A dimension where ``ref`` is constant gets a
    box of half-width 0.5 around that value.
    """
    gen = np.asarray(gen, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if gen.ndim == 1:
        gen, ref = gen[:, None], ref[:, None]
    if gen.shape[0] == 0 or ref.shape[0] == 0:
        raise ValueError("trajectories must be nonempty")
    if gen.shape[1] != ref.shape[1]:
        raise ValueError("dimension mismatch")
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    flat = hi <= lo
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    width = hi - lo
    p = _hist(gen, lo, width, n_bins) / gen.shape[0] + alpha_smooth
    q = _hist(ref, lo, width, n_bins) / ref.shape[0] + alpha_smooth
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * (np.log(p) - np.log(q))), 0.0))


def _benettin_numpy(jacobians):
    n, M, _ = jacobians.shape
    Q = np.eye(M)
    out = np.empty((n, M))
    for t in range(n):
        Q, R = np.linalg.qr(jacobians[t] @ Q)
        d = np.diagonal(R)
        with np.errstate(divide="ignore"):
            out[t] = np.log(np.abs(d))
        Q = Q * np.where(d < 0, -1.0, 1.0)
    return out


def benettin_log_r(jacobians) -> np.ndarray:
    J = np.ascontiguousarray(jacobians, dtype=float)
    return _kernels.benettin_log_r(J) if USE_NUMBA else _benettin_numpy(J)


def lyapunov_spectrum(jacobians, dt: float = 1.0, burn_in: int = 0) -> np.ndarray:
    """Benettin QR estimate, descending, in units of 1/time."""
    J = np.asarray(jacobians, dtype=float)
    if J.ndim != 3 or J.shape[1] != J.shape[2]:
        raise ValueError("jacobians must have shape (n, M, M)")
    if not 0 <= burn_in < J.shape[0]:
        raise ValueError("burn_in must be smaller than the sequence length")
    logs = benettin_log_r(J)[burn_in:]
    return np.sort(logs.mean(axis=0) / dt)[::-1]


def lorenz_reference_spectrum(n_steps: int = 200_000, burn_in: int = 1000, params=None, z0=(1.0, 1.0, 1.0)):
    """Benettin on finite-difference Jacobians of the Lorenz RK4 step."""
    from .dynsys import LorenzParams, rk4_step_jacobian_fd, simulate_lorenz

    params = params or LorenzParams()
    orbit = simulate_lorenz(z0, n_steps + burn_in, params).states
    jac = rk4_step_jacobian_fd(orbit[:-1], params)
    return lyapunov_spectrum(jac, params.dt, burn_in)


@dataclass
class QoiReport:
    d_stsp: float
    lambda1: float
    lambda1_error: float
    meta: dict = field(default_factory=dict)

    @property
    def divergent(self) -> bool:
        return bool(self.meta.get("divergent", False))


@dataclass(frozen=True)
class RolloutConfig:
    T: int = 10_000
    burn_in: int = 1000
    dt: float = 0.01
    n_bins: int = 30
    alpha_smooth: float = 1e-5
    lambda_ref: float = LAMBDA1_LORENZ


def qoi_from_rollout(gen_raw, jacobians, ref_raw, config: RolloutConfig = RolloutConfig(), meta=None) -> QoiReport:
    gen_raw = np.asarray(gen_raw, dtype=float)
    d = d_stsp(gen_raw, ref_raw, config.n_bins, config.alpha_smooth)
    lam = np.nan
    if len(jacobians) > 0:
        burn = config.burn_in if config.burn_in < len(jacobians) else 0
        lam = float(lyapunov_spectrum(jacobians, config.dt, burn)[0])
    meta = dict(meta or {}, T=int(config.T), burn_in=int(config.burn_in))
    return QoiReport(d, lam, lam - config.lambda_ref, meta)


def qoi_eval(params: AlrnnParams, reference, config: RolloutConfig = RolloutConfig()) -> QoiReport:
    """Hard-gated rollout from the embedded first observation; D_stsp in raw coordinates."""
    obs = np.asarray(reference.observations, dtype=float)
    std = reference.standardizer
    to_raw = std.invert if (std is not None and reference.frame == "standardized") else (lambda v: v)
    z1 = embed_init(params, obs[0])
    divergent = False
    try:
        rec = free_rollout(params, z1, config.T, gate_mode="hard")
    except DivergenceError as exc:
        rec = exc.record
        divergent = True
    states, codes = rec.latents, rec.codes
    keep = states[config.burn_in:] if states.shape[0] > config.burn_in else states
    gen = to_raw(keep[:, :params.N])
    if divergent:
        gen = np.clip(gen, -1e300, 1e300)
    jac = np.stack([step_jacobian(params, c) for c in codes]) if len(codes) else np.zeros((0, params.M, params.M))
    meta = {"gate_mode": "hard", "divergent": divergent, "n_valid": int(states.shape[0]),
            "params_sha256": params.digest()}
    return qoi_from_rollout(gen, jac, to_raw(obs), config, meta)


def _trace(m):
    return float(np.trace(m.entries if isinstance(m, CurvatureMatrix) else np.asarray(m)))


def curvature_gap(I_itf, I_obs, T: int) -> float:
    """``log10(tr I_itf / (tr I_obs / T))`` with ``I_itf`` per step and ``I_obs`` summed over the window."""
    a, b = _trace(I_itf), _trace(I_obs)
    if a <= 0 or b <= 0:
        raise ValueError("curvature traces must be positive")
    return float(np.log10(a / (b / T)))


@dataclass
class MismatchReport:
    g_Q: float
    delta_logdet: float
    gamma_quantiles: dict
    ov_k: float
    mu: float
    k: int
    gamma: np.ndarray = field(default=None, repr=False)


def _entries(m):
    return symmetrize(m.entries if isinstance(m, CurvatureMatrix) else m)


def subspace_overlap(X, Y, k: int) -> float:
    """Mean squared cosine of the principal angles between the top-k eigenspaces."""
    _, U = np.linalg.eigh(symmetrize(X))
    _, V = np.linalg.eigh(symmetrize(Y))
    U, V = U[:, ::-1][:, :k], V[:, ::-1][:, :k]
    return float(min(max(np.sum((U.T @ V) ** 2) / k, 0.0), 1.0))


def matrix_diagnostics(I_itf, I_obs, T: int, epsilon: float = 1e-6, k: int = 50,
                       alphas=(0.1, 0.5, 0.9)) -> MismatchReport:
    A = _entries(I_itf)
    B = _entries(I_obs) / T
    p = A.shape[0]
    k = min(k, p)
    mu = epsilon * (np.trace(A) + np.trace(B)) / (2 * p)
    Am, Bm = A + mu * np.eye(p), B + mu * np.eye(p)
    try:
        Lb = np.linalg.cholesky(Bm)
        La = np.linalg.cholesky(Am)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("stabilized curvature matrix is not positive definite") from exc
    logdet = 2 * (np.sum(np.log(np.diag(La))) - np.sum(np.log(np.diag(Lb)))) / np.log(10)
    C = linalg.solve_triangular(Lb, linalg.solve_triangular(Lb, Am, lower=True).T, lower=True)
    gamma = np.linalg.eigvalsh(symmetrize(C))
    lg = np.log10(np.clip(gamma, np.finfo(float).tiny, None))
    quant = {float(a): float(np.quantile(lg, a, method="linear")) for a in alphas}
    return MismatchReport(curvature_gap(A, _entries(I_obs), T), float(logdet), quant,
                          subspace_overlap(Am, Bm, k), float(mu), int(k), gamma)


@dataclass
class RankAssociation:
    spearman_r: float
    p_value: float
    partial_r: float
    ci_low: float
    ci_high: float
    n: int


def _rank_residual(y, c):
    X = np.column_stack([np.ones_like(c), c])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return y - X @ beta


def partial_spearman(h, g, covariate) -> float:
    rh, rg, rc = (stats.rankdata(v) for v in (h, g, covariate))
    return float(np.corrcoef(_rank_residual(rh, rc), _rank_residual(rg, rc))[0, 1])


def rank_association(h_values, g_values, covariate=None, n_boot: int = 2000, seed=0) -> RankAssociation:
    """Spearman r (mid-rank ties), partial r against ``covariate`` ranks, bootstrap percentile 95% CI of r."""
    h = np.asarray(h_values, dtype=float)
    g = np.asarray(g_values, dtype=float)
    if h.shape != g.shape or h.ndim != 1 or h.size < 5:
        raise ValueError("need two equal-length series with at least 5 points")
    if np.ptp(h) == 0 or np.ptp(g) == 0:
        raise ValueError("constant input series")
    res = stats.spearmanr(h, g)
    partial = np.nan
    if covariate is not None:
        c = np.asarray(covariate, dtype=float)
        partial = partial_spearman(h, g, c) if np.ptp(c) > 0 else float(res.statistic)

    def stat(a, b):
        with np.errstate(invalid="ignore", divide="ignore"):
            return stats.spearmanr(a, b).statistic

    boot = stats.bootstrap((h, g), stat, paired=True, vectorized=False, n_resamples=n_boot,
                           method="percentile", random_state=substream(seed, "rank_bootstrap"))
    ci = boot.confidence_interval
    return RankAssociation(float(res.statistic), float(res.pvalue), float(partial),
                           float(ci.low), float(ci.high), int(h.size))
