"""ITF-aligned Gauss-Newton/Fisher matrix via forward sensitivities.

Parameter ordering is ``theta = [a; vec(W) row-major; h]`` throughout; the
embedding ``E`` is held fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _io
from .alrnn import AlrnnParams, itf_rollout, phi_star, step_jacobian


@dataclass
class CurvatureMatrix:
    entries: np.ndarray
    M: int
    per_step_normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        p = self.M * self.M + 2 * self.M
        if self.entries.shape != (p, p):
            raise ValueError(f"expected ({p}, {p}) matrix for M={self.M}, got {self.entries.shape}")

    @property
    def p(self) -> int:
        return self.entries.shape[0]

    def trace(self) -> float:
        return float(np.trace(self.entries))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(symmetrize(self.entries))[0])

    def is_psd(self, rel_tol: float = 1e-8) -> bool:
        tr = abs(self.trace())
        return self.min_eigenvalue() >= -rel_tol * max(tr, 1e-300) / self.p

    def blocks(self) -> dict:
        M = self.M
        return {"a": [0, M], "W": [M, M + M * M], "h": [M + M * M, M * M + 2 * M]}


def symmetrize(X):
    X = np.asarray(X, dtype=float)
    return 0.5 * (X + X.T)


def param_jacobian_blocks(z_bar, P: int) -> np.ndarray:
    """``dF/dtheta`` at ``z_bar``: ``[diag(z) | I kron phi*(z)^T | I]``."""
    z_bar = np.asarray(z_bar, dtype=float)
    M = z_bar.shape[0]
    V = np.zeros((M, M * M + 2 * M))
    idx = np.arange(M)
    V[idx, idx] = z_bar
    phi = phi_star(z_bar, P)
    for i in range(M):
        V[i, M + i * M:M + (i + 1) * M] = phi
    V[idx, M + M * M + idx] = 1.0
    return V


def sensitivity_step(S, params: AlrnnParams, z_bar, code, forced: bool) -> np.ndarray:
    """``S_{t+1} = J_t (masked S_t) + V_t``; the mask zeroes the observed rows at forcing times."""
    S = np.array(S, dtype=float, copy=True)
    if forced:
        S[:params.N] = 0.0
    return step_jacobian(params, code) @ S + param_jacobian_blocks(z_bar, params.P)


def itf_sensitivities(params: AlrnnParams, x, tau: int) -> np.ndarray:
    """Prediction Jacobians ``B S_{t+1}`` stacked as (T-1, N, p)."""
    rec = itf_rollout(params, x, tau)
    T = rec.latents.shape[0]
    S = np.zeros((params.M, params.p))
    out = np.empty((T - 1, params.N, params.p))
    for t in range(T - 1):
        S = sensitivity_step(S, params, rec.fed[t], rec.codes[t], bool(rec.forced_mask[t]))
        out[t] = S[:params.N]
    return out


def itf_fisher(params: AlrnnParams, x, tau: int, sigma_obs: float) -> CurvatureMatrix:
    if not sigma_obs > 0:
        raise ValueError("sigma_obs must be positive")
    x = np.asarray(x, dtype=float)
    T = x.shape[0]
    J = itf_sensitivities(params, x, tau).reshape(-1, params.p)
    F = symmetrize(J.T @ J / ((T - 1) * sigma_obs ** 2))
    meta = {"tau": int(tau), "sigma_obs": float(sigma_obs), "T": int(T), "source_params_sha256": params.digest()}
    return CurvatureMatrix(F, params.M, True, meta)


def save_matrix(path, mat: CurvatureMatrix):
    header = {"kind": "curvature_matrix", "p": mat.p, "M": mat.M, "blocks": mat.blocks(),
              "per_step_normalized": bool(mat.per_step_normalized), "meta": mat.meta}
    return _io.write_blob(path, header, {"entries": mat.entries})


def load_matrix(path) -> CurvatureMatrix:
    header, arr = _io.read_blob(path)
    return CurvatureMatrix(arr["entries"], header["M"], header["per_step_normalized"], header["meta"])
