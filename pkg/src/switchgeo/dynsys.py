"""Lorenz-63 trajectories: generation, observation noise, standardization, persistence."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _io, _kernels
from ._accel import USE_NUMBA
from .errors import ConfigError, NumericalError
from .rng import substream

DEFAULT_Z0 = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class NoiseSpec:
    sigma_proc: float = 0.0
    sigma_obs: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_proc < 0 or self.sigma_obs < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            raise ValueError("standardizer stds must be strictly positive")

    @classmethod
    def fit(cls, data) -> "Standardizer":
        data = np.asarray(data, dtype=float).reshape(-1, np.shape(data)[-1])
        std = data.std(axis=0)
        if np.any(std <= 0):
            bad = np.flatnonzero(std <= 0).tolist()
            raise ValueError(f"zero-variance dimension(s) {bad} cannot be standardized")
        return cls(data.mean(axis=0), std)

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, obj) -> "Standardizer":
        return cls(np.asarray(obj["mean"], dtype=float), np.asarray(obj["std"], dtype=float))


@dataclass
class TrajectoryBundle:
    """States and observations on a shared time grid.

    ``frame`` says which coordinates both arrays are in. ``standardizer`` is the
    map raw -> standardized (``None`` until fitted).
    """

    states: np.ndarray
    observations: np.ndarray
    standardizer: Standardizer | None = None
    frame: str = "raw"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        if self.states.shape != self.observations.shape or self.states.ndim != 2:
            raise ValueError("states and observations must share shape (T, N)")
        if self.frame not in ("raw", "standardized"):
            raise ValueError(f"frame must be 'raw' or 'standardized', got {self.frame!r}")

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1]


def lorenz_field(z, params: LorenzParams = LorenzParams()):
    z = np.asarray(z, dtype=float)
    x, y, w = z[..., 0], z[..., 1], z[..., 2]
    return np.stack([params.sigma * (y - x), x * (params.rho - w) - y, x * y - params.beta * w], axis=-1)


def rk4_step(z, params: LorenzParams = LorenzParams()):
    """Classical RK4 step; vectorized over leading axes of ``z``."""
    dt = params.dt
    k1 = lorenz_field(z, params)
    k2 = lorenz_field(z + 0.5 * dt * k1, params)
    k3 = lorenz_field(z + 0.5 * dt * k2, params)
    k4 = lorenz_field(z + dt * k3, params)
    return z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz_step_rk4(state, params: LorenzParams = LorenzParams()):
    out = rk4_step(np.asarray(state, dtype=float), params)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Lorenz state", module="dynsys_data")
    return out


def rk4_step_jacobian_fd(states, params: LorenzParams = LorenzParams(), eps: float = 1e-6):
    """Central-difference Jacobians of the RK4 step at each row of ``states``."""
    states = np.asarray(states, dtype=float)
    jac = np.empty(states.shape[:-1] + (3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        jac[..., :, k] = (rk4_step(states + e, params) - rk4_step(states - e, params)) / (2 * eps)
    return jac


def _orbit_numpy(z0, n_steps, params, incr):
    states = np.empty((n_steps, 3))
    states[0] = z0
    for t in range(n_steps - 1):
        nxt = rk4_step(states[t], params) + incr[t]
        if not np.all(np.isfinite(nxt)):
            return states, t + 1
        states[t + 1] = nxt
    return states, -1


def _orbit(z0, n_steps, params, incr):
    z0 = np.asarray(z0, dtype=float)
    incr = np.ascontiguousarray(incr, dtype=float)
    if USE_NUMBA:
        states, bad = _kernels.lorenz_orbit(z0, n_steps, params.sigma, params.rho, params.beta, params.dt, incr)
    else:
        states, bad = _orbit_numpy(z0, n_steps, params, incr)
    if bad >= 0:
        raise NumericalError("non-finite Lorenz state", module="dynsys_data", index=int(bad))
    return states


def simulate_lorenz(z0=DEFAULT_Z0, T: int = 10_000, params: LorenzParams = LorenzParams(),
                    noise: NoiseSpec = NoiseSpec()) -> TrajectoryBundle:
    """RK4 orbit, with Euler-Maruyama diffusion scaled by the reference std when ``sigma_proc > 0``.

    The diffusion scale ``s_ref`` is the per-coordinate std of a deterministic
    orbit of the same length from the same ``z0``.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    zeros = np.zeros((T - 1, 3))
    meta = {"generator": "lorenz63", "params": vars(params).copy(), "z0": [float(v) for v in z0],
            "T": int(T), "sigma_proc": float(noise.sigma_proc), "seed": int(noise.seed)}
    if noise.sigma_proc == 0:
        states = _orbit(z0, T, params, zeros)
    else:
        ref = _orbit(z0, T, params, zeros)
        s_ref = ref.std(axis=0)
        eps = substream(noise.seed, "lorenz", "process").standard_normal((T - 1, 3))
        incr = noise.sigma_proc * np.sqrt(params.dt) * s_ref * eps
        states = _orbit(z0, T, params, incr)
        meta["s_ref"] = [float(v) for v in s_ref]
    return TrajectoryBundle(states, states.copy(), None, "raw", meta)


def add_observation_noise(bundle: TrajectoryBundle, noise: NoiseSpec) -> TrajectoryBundle:
    """observations = states + sigma_obs * diag(s_train) * eta, in raw coordinates."""
    if bundle.frame != "raw":
        raise ValueError("observation noise is added in the raw frame")
    s_train = bundle.states.std(axis=0)
    eta = substream(noise.seed, "lorenz", "observation").standard_normal(bundle.states.shape)
    obs = bundle.states + noise.sigma_obs * s_train * eta
    meta = dict(bundle.meta, sigma_obs=float(noise.sigma_obs), obs_seed=int(noise.seed),
                s_train=[float(v) for v in s_train])
    return replace(bundle, observations=obs, meta=meta)


def standardize(bundle: TrajectoryBundle, standardizer: Standardizer | None = None) -> TrajectoryBundle:
    """Map a raw bundle to zero-mean/unit-std observation coordinates."""
    if bundle.frame != "raw":
        raise ValueError("bundle is already standardized")
    std = standardizer or Standardizer.fit(bundle.observations)
    return TrajectoryBundle(std.apply(bundle.states), std.apply(bundle.observations), std,
                            "standardized", dict(bundle.meta))


def unstandardize(bundle: TrajectoryBundle) -> TrajectoryBundle:
    if bundle.frame != "standardized" or bundle.standardizer is None:
        raise ValueError("bundle is not standardized")
    std = bundle.standardizer
    return TrajectoryBundle(std.invert(bundle.states), std.invert(bundle.observations), std,
                            "raw", dict(bundle.meta))


@dataclass(frozen=True)
class SaemDataConfig:
    T: int = 5000
    burn_in: int = 1000
    sigma_obs: float = 0.085
    n_seq: int = 4
    seed: int = 0
    z0_jitter: float = 1.0


def make_saem_dataset(config: SaemDataConfig = SaemDataConfig(),
                      params: LorenzParams = LorenzParams()) -> list[TrajectoryBundle]:
    """Independent noisy Lorenz sequences, burn-in removed, pooled standardization.

    Sequence ``j`` starts from (1, 1, 1) plus a N(0, z0_jitter^2) perturbation
    drawn from its own substream (identical starts would give identical orbits).
    """
    if config.T <= config.burn_in:
        raise ConfigError([("/data/T", "T must exceed burn_in")])
    raws = []
    for j in range(config.n_seq):
        z0 = np.asarray(DEFAULT_Z0)
        if config.n_seq > 1 and config.z0_jitter > 0:
            z0 = z0 + config.z0_jitter * substream(config.seed, "saem_data", "z0", j).standard_normal(3)
        full = simulate_lorenz(z0, config.T, params, NoiseSpec(0.0, 0.0, config.seed))
        kept = TrajectoryBundle(full.states[config.burn_in:], full.states[config.burn_in:], None, "raw",
                                dict(full.meta, burn_in=int(config.burn_in), sequence=j))
        raws.append(add_observation_noise(kept, NoiseSpec(0.0, config.sigma_obs, _seq_seed(config.seed, j))))
    pooled = Standardizer.fit(np.concatenate([b.observations for b in raws]))
    return [standardize(b, pooled) for b in raws]


def _seq_seed(seed: int, j: int) -> int:
    return int(substream(seed, "saem_data", "obs_seed", j).integers(2**31))


def save_bundle(bundle: TrajectoryBundle, path) -> list[Path]:
    header = {"kind": "trajectory", "T": bundle.T, "N": bundle.N, "frame": bundle.frame,
              "standardizer": bundle.standardizer.to_json() if bundle.standardizer else None,
              "meta": bundle.meta}
    return _io.write_blob(path, header, {"states": bundle.states, "observations": bundle.observations})


def load_bundle(path) -> TrajectoryBundle:
    header, arrays = _io.read_blob(path)
    std = Standardizer.from_json(header["standardizer"]) if header.get("standardizer") else None
    return TrajectoryBundle(arrays["states"], arrays["observations"], std, header["frame"], header["meta"])


def export_csv(bundle: TrajectoryBundle, path) -> Path:
    cols = [f"state_{k}" for k in range(bundle.N)] + [f"obs_{k}" for k in range(bundle.N)]
    return _io.write_csv(path, ["t"] + cols,
                         ([t, *bundle.states[t], *bundle.observations[t]] for t in range(bundle.T)))
