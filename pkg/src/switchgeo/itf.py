"""Identity-teacher-forced training: loss, manual BPTT, RAdam, schedule, init and the training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from ._accel import USE_NUMBA
from .alrnn import AlrnnParams, itf_rollout
from .errors import NumericalError
from .rng import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    tau: int = 16
    batch_size: int = 16
    bptt_len: int = 200
    epochs: int = 2000
    batches_per_epoch: int = 50
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    seed: int = 0
    M: int = 30
    P: int = 10

    def __post_init__(self):
        ints = ("tau", "batch_size", "bptt_len", "epochs", "batches_per_epoch", "M", "P")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.bptt_len < 2:
            raise ValueError("bptt_len must be at least 2")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")


def itf_loss(params: AlrnnParams, x, tau: int) -> float:
    """Mean over t of ||B z_{t+1} - x_{t+1}||^2 along the forced rollout."""
    x = np.asarray(x, dtype=float)
    rec = itf_rollout(params, x, tau)
    return float(np.sum((rec.predictions - x[1:]) ** 2) / (x.shape[0] - 1))


def _loss_grad_numpy(a, W, h, E, X, tau, P):
    B, T, N = X.shape
    M = a.shape[0]
    start = M - P
    mask = (np.arange(1, T + 1) % tau) == 0
    zbar = np.empty((T - 1, B, M))
    resid = np.empty((T - 1, B, N))
    z = X[:, 0] @ E.T
    z[:, :N] = X[:, 0]
    for t in range(T - 1):
        zb = z.copy()
        if mask[t]:
            zb[:, :N] = X[:, t]
        zbar[t] = zb
        phi = zb.copy()
        phi[:, start:] = np.where(zb[:, start:] > 0, zb[:, start:], 0.0)
        z = a * zb + phi @ W.T + h
        resid[t] = z[:, :N] - X[:, t + 1]
    loss = float(np.sum(resid ** 2) / ((T - 1) * B))
    scale = 2.0 / ((T - 1) * B)
    da, dW, dh = np.zeros(M), np.zeros((M, M)), np.zeros(M)
    g = np.zeros((B, M))
    for t in range(T - 2, -1, -1):
        g[:, :N] += scale * resid[t]
        zb = zbar[t]
        active = np.ones_like(zb)
        active[:, start:] = zb[:, start:] > 0
        da += np.sum(g * zb, axis=0)
        dh += g.sum(axis=0)
        dW += g.T @ (zb * active)
        g = a * g + (g @ W) * active
        if mask[t]:
            g[:, :N] = 0.0
    dE = np.zeros((M, N))
    dE[N:] = g[:, N:].T @ X[:, 0]
    return loss, da, dW, dh, dE


def itf_loss_and_grad(params: AlrnnParams, batch, tau: int):
    """Mean batch loss and its gradient as a flat vector over ``[a; vec(W); h; vec(E)]``."""
    X = np.ascontiguousarray(batch, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    args = (params.a, params.W, params.h, params.E, X, int(tau), params.P)
    if USE_NUMBA:
        loss, da, dW, dh, dE = _kernels.itf_loss_grad_batch(*args)
    else:
        loss, da, dW, dh, dE = _loss_grad_numpy(*args)
    return float(loss), np.concatenate([da, dW.ravel(), dh, dE.ravel()])


def itf_loss_grad(params: AlrnnParams, batch, tau: int) -> np.ndarray:
    return itf_loss_and_grad(params, batch, tau)[1]


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def radam_update(opt: OptimizerState, params, grad, lr: float):
    """One RAdam step. Returns ``(new_params, new_state)``; inputs are not mutated."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != opt.m.shape or params.shape != opt.m.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    b1, b2 = opt.beta1, opt.beta2
    t = opt.step + 1
    m = b1 * opt.m + (1 - b1) * grad
    v = b2 * opt.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    rho_inf = 2.0 / (1 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / (1 - b2 ** t)
    if rho_t > 4.0:
        v_hat = v / (1 - b2 ** t)
        r = np.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        new = params - lr * r * m_hat / (np.sqrt(v_hat) + opt.eps)
    else:
        new = params - lr * m_hat
    return new, OptimizerState(m, v, t, b1, b2, opt.eps)


def lr_schedule(epoch: int, epochs: int, lr_start: float = 1e-3, lr_end: float = 1e-5) -> float:
    if not 0 <= epoch < epochs:
        raise ValueError("need 0 <= epoch < epochs")
    if epochs == 1:
        return float(lr_start)
    return float(lr_start * (lr_end / lr_start) ** (epoch / (epochs - 1)))


def init_params(seed, M: int, P: int, N: int) -> AlrnnParams:
    rng = substream(seed, "itf", "init")
    G = rng.standard_normal((M, M))
    S = G @ G.T / M
    a = np.diag(S) / np.linalg.eigvalsh(S)[-1]
    W = 0.1 * rng.standard_normal((M, M))
    bound = 1.0 / np.sqrt(N)
    E = rng.uniform(-bound, bound, size=(M, N))
    return AlrnnParams(a, W, np.zeros(M), E, P)


@dataclass
class TrainResult:
    params: AlrnnParams
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def history_rows(self):
        return [(h["epoch"], h["mean_loss"], h["lr"]) for h in self.history]


def train(config: TrainConfig, bundle, init: AlrnnParams | None = None, progress=None) -> TrainResult:
    """Mini-batch ITF training on ``bundle.observations`` with uniformly drawn windows (with replacement)."""
    x = np.asarray(getattr(bundle, "observations", bundle), dtype=float)
    T, N = x.shape
    L = config.bptt_len
    if T < L:
        raise ValueError(f"training sequence (T={T}) shorter than bptt_len={L}")
    params = init if init is not None else init_params(config.seed, config.M, config.P, N)
    flat = params.flat()
    opt = OptimizerState.zeros(flat.size)
    rng = substream(config.seed, "itf", "windows")
    offs = np.arange(L)
    history = []
    batch_idx = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.epochs, config.lr_start, config.lr_end)
        losses = []
        for _ in range(config.batches_per_epoch):
            starts = rng.integers(0, T - L + 1, size=config.batch_size)
            loss, grad = itf_loss_and_grad(params, x[starts[:, None] + offs], config.tau)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NumericalError("non-finite ITF loss", module="itf_train", index=batch_idx)
            flat, opt = radam_update(opt, flat, grad, lr)
            params = params.with_flat(flat)
            losses.append(loss)
            batch_idx += 1
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr})
        if progress:
            progress(history[-1])
        log.debug("epoch %d loss %.6g lr %.3g", epoch, history[-1]["mean_loss"], lr)
    return TrainResult(params, history, asdict(config))
