"""Particle-SAEM fine-tuning on windowed conditional evidence.

Configurations: ``baseline`` (no updates), ``calib`` (noise scales only) and
``full`` (noise scales plus the drift ``a, W, h``). Each iteration draws
training windows, smooths them with the RBPF plus backward sampling, solves a
ridge M-step from the averaged sufficient statistics and blends.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._pool import map_ordered
from .alrnn import AlrnnParams, gate_vector
from .errors import NumericalError
from .rbpf import PalrnnNoise, backward_sample, rbpf_filter
from .rng import substream

log = logging.getLogger(__name__)

CONFIGURATIONS = ("baseline", "calib", "full")


@dataclass(frozen=True)
class SaemConfig:
    window_len: int = 32
    iterations: int = 8
    windows_per_iter: int = 80
    ridge: float = 1e-2
    blend: float = 0.25
    n_particles: int = 256
    n_smooth: int = 8
    tau_ess: float = 0.5
    sigma_g: float = 0.7
    sigma_min: float = 1e-4
    configuration: str = "full"
    heldout_window_count: int = 120
    seed: int = 0

    def __post_init__(self):
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if not 0 <= self.blend <= 1:
            raise ValueError("blend must lie in [0, 1]")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be positive")
        if self.configuration not in CONFIGURATIONS:
            raise ValueError(f"configuration must be one of {CONFIGURATIONS}")


@dataclass(frozen=True)
class WindowIndex:
    """Window over 0-based indices ``start .. start + L`` (boundary observation first)."""

    seq: int
    start: int


def _observations(seq):
    return np.asarray(getattr(seq, "observations", seq), dtype=float)


def make_windows(sequences, L: int, n_heldout: int = 120):
    """Strided non-overlapping windows; the trailing windows of each sequence are held out.

    Each sequence gives up to ``ceil(n_heldout / n_seq)`` held-out windows,
    never more than half of its windows, and the total is capped at
    ``n_heldout``.
    """
    lengths = [_observations(s).shape[0] for s in sequences]
    if not lengths:
        raise ValueError("no sequences")
    short = [j for j, T in enumerate(lengths) if T < L + 1]
    if short:
        raise ValueError(f"sequences {short} are shorter than one window (L + 1 = {L + 1})")
    per_seq = math.ceil(n_heldout / len(lengths)) if n_heldout > 0 else 0
    train, held = [], []
    for j, T in enumerate(lengths):
        n_win = (T - 1) // L
        wins = [WindowIndex(j, k * L) for k in range(n_win)]
        n_hold = min(per_seq, n_win // 2, n_heldout - len(held))
        cut = n_win - n_hold
        train.extend(wins[:cut])
        held.extend(wins[cut:])
    return train, held


def window_data(sequences, w: WindowIndex, L: int):
    return _observations(sequences[w.seq])[w.start:w.start + L + 1]


@dataclass
class SuffStats:
    """Per-row normal equations with features ``[z_i; D(c) z; 1]``, averaged over (window, draw) pairs."""

    phiphi: np.ndarray
    phiy: np.ndarray
    yy: np.ndarray
    n_trans: float
    sse_obs: float
    n_obs: float
    n_pairs: int

    def scaled(self, c: float) -> "SuffStats":
        return SuffStats(self.phiphi * c, self.phiy * c, self.yy * c, self.n_trans * c, self.sse_obs * c,
                         self.n_obs * c, self.n_pairs)


def _row_features(z, codes, M):
    """(T-1, M, M+2) feature tensor: row ``i`` holds ``[z_i, D(c) z, 1]``."""
    zt = z[:-1]
    u = gate_vector(codes, M) * zt
    n = zt.shape[0]
    phi = np.empty((n, M, M + 2))
    phi[:, :, 0] = zt
    phi[:, :, 1:M + 1] = u[:, None, :]
    phi[:, :, M + 1] = 1.0
    return phi


def window_suff_stats(draws, x_window, M: int, N: int) -> SuffStats:
    """Sums over the draws of one window (not yet averaged)."""
    x = np.asarray(x_window, dtype=float)
    phiphi = np.zeros((M, M + 2, M + 2))
    phiy = np.zeros((M, M + 2))
    yy = np.zeros(M)
    sse_obs = 0.0
    n_trans = 0
    for d in draws:
        z = np.asarray(d.states, dtype=float)
        phi = _row_features(z, d.codes, M)
        y = z[1:]
        phiphi += np.einsum("tia,tib->iab", phi, phi)
        phiy += np.einsum("tia,ti->ia", phi, y)
        yy += np.sum(y * y, axis=0)
        n_trans += y.shape[0]
        sse_obs += float(np.sum((x[1:] - z[1:, :N]) ** 2))
    n_obs = len(draws) * (x.shape[0] - 1) * N
    return SuffStats(phiphi, phiy, yy, float(n_trans), sse_obs, float(n_obs), len(draws))


def combine_stats(parts) -> SuffStats:
    """Equal-weight mean over all (window, draw) pairs."""
    parts = list(parts)
    n_pairs = sum(p.n_pairs for p in parts)
    if n_pairs == 0:
        raise ValueError("no statistics to combine")
    tot = SuffStats(sum(p.phiphi for p in parts), sum(p.phiy for p in parts), sum(p.yy for p in parts),
                    sum(p.n_trans for p in parts), sum(p.sse_obs for p in parts), sum(p.n_obs for p in parts),
                    n_pairs)
    return tot.scaled(1.0 / n_pairs)


def _beta_from_params(params: AlrnnParams):
    return np.column_stack([params.a, params.W, params.h])


def _solve_rows(stats: SuffStats, M: int, P: int, ridge: float):
    beta = np.empty((M, M + 2))
    for i in range(M):
        A = stats.phiphi[i]
        b = stats.phiy[i]
        if ridge > 0:
            beta[i] = np.linalg.solve(A + ridge * np.eye(M + 2), b)
            continue
        if i < M - P:
            # z_i appears twice (a_i and the ungated W_ii column); fit their sum and split it evenly
            keep = np.r_[1:M + 2]
            sub = _solve_exact(A[np.ix_(keep, keep)], b[keep], i)
            beta[i, 1:] = sub
            beta[i, 1 + i] = beta[i, 0] = sub[i] / 2.0
        else:
            beta[i] = _solve_exact(A, b, i)
    return beta


def _solve_exact(A, b, row):
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise NumericalError("singular M-step system (use ridge > 0)", module="saem", index=row)
    return np.linalg.solve(A, b)


def _proc_sse(stats: SuffStats, beta):
    return float(np.sum(stats.yy - 2 * np.einsum("ia,ia->i", beta, stats.phiy)
                        + np.einsum("ia,iab,ib->i", beta, stats.phiphi, beta)))


def m_step(stats: SuffStats, params: AlrnnParams, noise: PalrnnNoise, config: SaemConfig):
    """Provisional ``(params, noise)``; drift is re-solved only when ``configuration == 'full'``."""
    M, P = params.M, params.P
    if config.configuration == "full":
        beta = _solve_rows(stats, M, P, config.ridge)
        new = AlrnnParams(beta[:, 0], beta[:, 1:M + 1], beta[:, M + 1], params.E, P)
    else:
        beta = _beta_from_params(params)
        new = params
    var_proc = max(_proc_sse(stats, beta), 0.0) / (stats.n_trans * M)
    var_obs = stats.sse_obs / stats.n_obs
    floor = config.sigma_min ** 2
    sp = math.sqrt(max(var_proc, floor))
    so = math.sqrt(max(var_obs, floor))
    return new, PalrnnNoise(sp, so, noise.sigma_g)


def blend(current, provisional, alpha: float):
    """``(1 - alpha) current + alpha provisional``."""
    current = np.asarray(current, dtype=float)
    if alpha == 0:
        return current.copy()
    if alpha == 1:
        return np.asarray(provisional, dtype=float).copy()
    return (1 - alpha) * current + alpha * np.asarray(provisional, dtype=float)


def _blend_step(params, noise, prov_params, prov_noise, config: SaemConfig):
    a = config.blend
    if config.configuration == "full":
        params = params.with_theta(blend(params.theta(), prov_params.theta(), a))
    sp, so = blend([noise.sigma_proc, noise.sigma_obs], [prov_noise.sigma_proc, prov_noise.sigma_obs], a)
    return params, PalrnnNoise(max(sp, config.sigma_min), max(so, config.sigma_min), noise.sigma_g)


@dataclass
class SaemResult:
    params: AlrnnParams
    noise: PalrnnNoise
    log: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    LOG_COLUMNS = ("iter", "mean_train_logz_per_step_dim", "sigma_proc", "sigma_obs", "n_failed")

    def log_rows(self):
        return [tuple(r[c] for c in self.LOG_COLUMNS) for r in self.log]


def _smooth_window(params, noise, x, config: SaemConfig, seed_key):
    cloud = rbpf_filter(params, noise, x, config.n_particles, config.tau_ess, substream(*seed_key, "filter"))
    draws = backward_sample(cloud, params, noise, config.n_smooth, substream(*seed_key, "smooth"))
    return cloud.log_evidence, draws


def saem_run(params: AlrnnParams, noise: PalrnnNoise, sequences, config: SaemConfig,
             train_windows=None) -> SaemResult:
    """Run ``config.iterations`` SAEM updates (none for ``baseline``)."""
    noise = PalrnnNoise(noise.sigma_proc, noise.sigma_obs, config.sigma_g)
    L = config.window_len
    if train_windows is None:
        train_windows, _ = make_windows(sequences, L, config.heldout_window_count)
    if not train_windows:
        raise ValueError("no training windows")
    N = params.N
    if _observations(sequences[0]).shape[1] != N:
        raise ValueError("checkpoint observation dimension does not match the dataset")
    result = SaemResult(params, noise, [], asdict(config))
    if config.configuration == "baseline":
        return result
    for r in range(config.iterations):
        rng = substream(config.seed, "saem", "windows", r)
        picks = rng.integers(0, len(train_windows), size=config.windows_per_iter)
        jobs = [(j, train_windows[int(k)]) for j, k in enumerate(picks)]

        def work(job, params=params, noise=noise, r=r):
            j, w = job
            x = window_data(sequences, w, L)
            try:
                logz, draws = _smooth_window(params, noise, x, config, (config.seed, "saem", r, j))
            except NumericalError as exc:
                return None, None, f"window {w.seq}:{w.start}: {exc}"
            return logz, window_suff_stats(draws, x, params.M, N), None

        out = map_ordered(work, jobs)
        failures = [msg for _, _, msg in out if msg]
        good = [(lz, st) for lz, st, msg in out if msg is None]
        if not good:
            raise NumericalError("every window failed in this iteration", module="saem", index=r)
        stats = combine_stats(st for _, st in good)
        prov_params, prov_noise = m_step(stats, params, noise, config)
        params, noise = _blend_step(params, noise, prov_params, prov_noise, config)
        entry = {"iter": r + 1, "mean_train_logz_per_step_dim": float(np.mean([lz for lz, _ in good])) / (L * N),
                 "sigma_proc": noise.sigma_proc, "sigma_obs": noise.sigma_obs, "n_failed": len(failures),
                 "failures": failures}
        result.log.append(entry)
        log.debug("saem iter %d logz/step/dim %.5f", r + 1, entry["mean_train_logz_per_step_dim"])
    result.params, result.noise = params, noise
    return result


def heldout_evidence(params: AlrnnParams, noise: PalrnnNoise, sequences, windows, L: int,
                     n_particles: int = 256, tau_ess: float = 0.5, seed=0):
    """Mean over windows of ``log Z / (L N)``; returns ``(mean, per_window)``."""
    if not windows:
        raise ValueError("held-out set is empty")
    N = params.N

    def work(job):
        k, w = job
        cloud = rbpf_filter(params, noise, window_data(sequences, w, L), n_particles, tau_ess,
                            substream(seed, "heldout", k))
        return cloud.log_evidence / (L * N)

    vals = np.array(map_ordered(work, list(enumerate(windows))))
    return float(vals.mean()), vals
