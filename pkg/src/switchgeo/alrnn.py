"""AL-RNN transition map, switching codes, rollouts and one-step Jacobians.

Parameters are ``theta = [a; vec(W); h]`` with row-major ``vec`` (``p = M^2 + 2M``)
plus the initialization embedding ``E`` (M x N). The first ``N`` latent
coordinates are observed (``B = [I_N 0]``); the last ``P`` are ReLU-gated.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import _io, _kernels
from ._accel import USE_NUMBA
from .errors import DivergenceError
from .rng import as_rng

DIVERGENCE_BOUND = 1e8


@dataclass(frozen=True, eq=False)
class AlrnnParams:
    a: np.ndarray
    W: np.ndarray
    h: np.ndarray
    E: np.ndarray
    P: int

    def __post_init__(self):
        for name in ("a", "W", "h", "E"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        M = self.a.shape[0]
        if self.a.shape != (M,) or self.W.shape != (M, M) or self.h.shape != (M,):
            raise ValueError("a, W, h must have shapes (M,), (M, M), (M,)")
        if self.E.ndim != 2 or self.E.shape[0] != M:
            raise ValueError("E must have shape (M, N)")
        if not 1 <= int(self.P) <= M:
            raise ValueError(f"need 1 <= P <= M, got P={self.P}, M={M}")
        if self.E.shape[1] > M:
            raise ValueError("observation dimension N must not exceed M")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in ("a", "W", "h", "E")):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "P", int(self.P))
        for name in ("a", "W", "h", "E"):
            getattr(self, name).setflags(write=False)

    @property
    def M(self) -> int:
        return self.a.shape[0]

    @property
    def N(self) -> int:
        return self.E.shape[1]

    @property
    def p(self) -> int:
        return self.M * self.M + 2 * self.M

    @property
    def A(self) -> np.ndarray:
        return np.diag(self.a)

    def theta(self) -> np.ndarray:
        """Drift block ``[a; vec(W); h]``."""
        return np.concatenate([self.a, self.W.ravel(), self.h])

    def with_theta(self, theta) -> "AlrnnParams":
        M = self.M
        theta = np.asarray(theta, dtype=float)
        return AlrnnParams(theta[:M], theta[M:M + M * M].reshape(M, M), theta[M + M * M:], self.E, self.P)

    def flat(self) -> np.ndarray:
        """All trainable parameters ``[a; vec(W); h; vec(E)]``."""
        return np.concatenate([self.theta(), self.E.ravel()])

    def with_flat(self, flat) -> "AlrnnParams":
        flat = np.asarray(flat, dtype=float)
        p = self.p
        return AlrnnParams(*_split_theta(flat[:p], self.M), flat[p:].reshape(self.M, self.N), self.P)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.M, self.P, self.N], dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.flat(), dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        return isinstance(other, AlrnnParams) and self.P == other.P and self.E.shape == other.E.shape \
            and np.array_equal(self.flat(), other.flat())

    __hash__ = None


def _split_theta(theta, M):
    return theta[:M], theta[M:M + M * M].reshape(M, M), theta[M + M * M:]


def phi_star(z, P: int):
    """Identity on the first M-P coordinates, ReLU on the last P."""
    out = np.array(z, dtype=float, copy=True)
    gated = out[..., out.shape[-1] - P:]
    gated[gated <= 0] = 0.0
    return out


def switching_code(z, P: int):
    """Code bits ``1{z_{M-P+j} > 0}``; a coordinate exactly at 0 gives bit 0."""
    z = np.asarray(z)
    return (z[..., z.shape[-1] - P:] > 0).astype(np.int8)


def gate_vector(code, M: int):
    code = np.asarray(code)
    P = code.shape[-1]
    d = np.ones(code.shape[:-1] + (M,))
    d[..., M - P:] = code
    return d


def gate_matrix(code, M: int):
    return np.diag(gate_vector(code, M))


def alrnn_step(params: AlrnnParams, z):
    z = np.asarray(z, dtype=float)
    return params.a * z + phi_star(z, params.P) @ params.W.T + params.h


def step_jacobian(params: AlrnnParams, code):
    """``A + W D(c)``; ReLU kink gets subgradient 0 through the code convention."""
    return np.diag(params.a) + params.W * gate_vector(code, params.M)


def affine_step(params: AlrnnParams, z, code):
    """``(A + W D(c)) z + h`` for a given code (used where codes are sampled)."""
    z = np.asarray(z, dtype=float)
    return params.a * z + (gate_vector(code, params.M) * z) @ params.W.T + params.h


def embed_init(params: AlrnnParams, x1):
    """``z1 = E x1`` with the observed block then overwritten by ``x1``."""
    x1 = np.asarray(x1, dtype=float)
    z = x1 @ params.E.T
    z[..., :params.N] = x1
    return z


def forcing_mask(T: int, tau: int):
    """Boolean mask over 0-based indices; true where the 1-based time is a multiple of tau."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return (np.arange(1, T + 1) % tau) == 0


@dataclass
class RolloutRecord:
    """``latents[t]`` is the state before any overwrite; ``fed[t]`` is what the map consumed."""

    latents: np.ndarray
    codes: np.ndarray
    predictions: np.ndarray
    forced_mask: np.ndarray
    fed: np.ndarray
    meta: dict = field(default_factory=dict)


def overwrite(z, x, N: int):
    out = np.array(z, dtype=float, copy=True)
    out[..., :N] = x
    return out


def itf_rollout(params: AlrnnParams, x, tau: int) -> RolloutRecord:
    x = np.asarray(x, dtype=float)
    T, N = x.shape
    if T < 2:
        raise ValueError("need T >= 2")
    mask = forcing_mask(T, tau)
    z = np.empty((T, params.M))
    fed = np.empty((T - 1, params.M))
    z[0] = embed_init(params, x[0])
    for t in range(T - 1):
        fed[t] = overwrite(z[t], x[t], N) if mask[t] else z[t]
        z[t + 1] = alrnn_step(params, fed[t])
    return RolloutRecord(z, switching_code(fed, params.P), z[1:, :N].copy(), mask, fed, {"tau": int(tau)})


def _hard_rollout_numpy(params, z1, T, bound):
    states = np.empty((T, params.M))
    states[0] = z1
    for t in range(T - 1):
        nxt = alrnn_step(params, states[t])
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > bound:
            return states, t + 1
        states[t + 1] = nxt
    return states, T


def free_rollout(params: AlrnnParams, z1, T: int, gate_mode: str = "hard", sigma_g: float | None = None,
                 sigma_proc: float = 0.0, seed=0, bound: float = DIVERGENCE_BOUND) -> RolloutRecord:
    """Autonomous rollout from ``z1``.

    ``gate_mode="hard"`` thresholds gates by sign; ``"probit"`` samples
    ``c_j ~ Bernoulli(Phi(z_j / sigma_g))``. ``sigma_proc > 0`` adds isotropic
    process noise. Raises :class:`DivergenceError` (carrying the valid prefix)
    if the state leaves ``|z| <= bound``.
    """
    z1 = np.asarray(z1, dtype=float)
    M, P = params.M, params.P
    if gate_mode == "hard" and sigma_proc == 0:
        if USE_NUMBA:
            states, n_valid = _kernels.alrnn_hard_rollout(params.a, params.W, params.h, P, z1, T, bound)
        else:
            states, n_valid = _hard_rollout_numpy(params, z1, T, bound)
        codes = switching_code(states[:n_valid - 1], P) if n_valid > 1 else np.zeros((0, P), np.int8)
    elif gate_mode in ("hard", "probit"):
        if gate_mode == "probit" and not (sigma_g and sigma_g > 0):
            raise ValueError("probit gates need sigma_g > 0")
        rng = as_rng(seed, "free_rollout")
        states = np.empty((T, M))
        codes = np.empty((T - 1, P), dtype=np.int8)
        states[0] = z1
        n_valid = T
        for t in range(T - 1):
            z = states[t]
            if gate_mode == "hard":
                c = switching_code(z, P)
            else:
                c = (rng.random(P) < ndtr(z[M - P:] / sigma_g)).astype(np.int8)
            nxt = affine_step(params, z, c)
            if sigma_proc > 0:
                nxt = nxt + sigma_proc * rng.standard_normal(M)
            codes[t] = c
            if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > bound:
                n_valid = t + 1
                break
            states[t + 1] = nxt
        codes = codes[:n_valid - 1]
    else:
        raise ValueError(f"unknown gate_mode {gate_mode!r}")
    meta = {"gate_mode": gate_mode, "sigma_g": sigma_g, "sigma_proc": float(sigma_proc), "T": int(T)}
    rec = RolloutRecord(states[:n_valid], codes, states[1:n_valid, :params.N].copy(),
                        np.zeros(n_valid, dtype=bool), states[:n_valid - 1], meta)
    if n_valid < T:
        raise DivergenceError(f"rollout diverged (|z| > {bound:g} or non-finite)", index=n_valid, record=rec)
    return rec


def save_checkpoint(path, params: AlrnnParams, meta: dict | None = None):
    header = {"kind": "alrnn_checkpoint", "M": params.M, "P": params.P, "N": params.N,
              "params_sha256": params.digest(), "meta": meta or {}}
    return _io.write_blob(path, header, {"a": params.a, "W": params.W, "h": params.h, "E": params.E})


def load_checkpoint(path) -> tuple[AlrnnParams, dict]:
    header, arr = _io.read_blob(path)
    params = AlrnnParams(arr["a"], arr["W"], arr["h"], arr["E"], header["P"])
    if params.digest() != header["params_sha256"]:
        raise ValueError("checkpoint parameter hash mismatch")
    return params, header
