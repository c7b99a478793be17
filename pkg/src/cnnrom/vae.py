"""Amortized variational inversion of KLE coefficients through a frozen surrogate.

A fully connected recognition network maps sensor readings ``Y`` to a
diagonal Gaussian ``q(z | Y)`` over the KLE coefficients.  It is trained by
maximizing the evidence lower bound

    ELBO = E_q[log N(Y | G(z), sigma_obs^2 I)] - KL(q || N(0, I))

with the reparameterization ``z = mu + sigma * eps``.  ``G`` is any
differentiable forward map from ``z`` to predicted sensor values; the usual
one composes the KLE field, the trained surrogate and the sensor selection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .autodiff.params import ParamStore, kaiming_normal
from .autodiff.tape import Tape, as_var
from .errors import ShapeError, TrainingError
from .fem import Grid2D
from .fields import KleModel

log = logging.getLogger(__name__)

LOG_VAR_RANGE = (-12.0, 4.0)


@dataclass(frozen=True)
class SensorLayout:
    grid: Grid2D
    indices: np.ndarray  # free-node indices
    s: int

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.min() < 0 or idx.max() >= self.grid.n_free:
            raise ValueError("sensor outside the free-node set")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate sensor locations")

    @property
    def n_obs(self) -> int:
        return len(self.indices)


def sensor_layout(grid: Grid2D, s: int) -> SensorLayout:
    """``s x s`` sensors spread uniformly over the free-node lattice (cell-centred spacing)."""
    H, W = grid.free_shape
    if not 1 <= s <= min(H, W):
        raise ValueError(f"cannot place {s}x{s} sensors on a {H}x{W} free lattice")
    rows = np.round((np.arange(s) + 0.5) * H / s - 0.5).astype(int)
    cols = np.round((np.arange(s) + 0.5) * W / s - 0.5).astype(int)
    idx = (rows[:, None] * W + cols[None, :]).ravel()
    return SensorLayout(grid, idx, s)


def observe(u_free, layout: SensorLayout, sigma_obs: float, seed=None) -> np.ndarray:
    """Sensor values of ``u`` (``(n_free,)`` or ``(B, n_free)``) plus ``N(0, sigma_obs^2)`` noise."""
    u = np.asarray(u_free, dtype=float)
    if u.shape[-1] != layout.grid.n_free:
        raise ShapeError(f"field has {u.shape[-1]} free values, layout expects {layout.grid.n_free}")
    y = u[..., layout.indices]
    if sigma_obs > 0:
        y = y + sigma_obs * np.random.default_rng(seed).standard_normal(y.shape)
    return y


@dataclass
class PosteriorGaussian:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_var = np.asarray(self.log_var, dtype=float)
        if self.mu.shape != self.log_var.shape or not (np.all(np.isfinite(self.mu))
                                                       and np.all(np.isfinite(self.log_var))):
            raise ValueError("posterior parameters must be finite and of equal shape")

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    def sample(self, n: int, seed=None) -> np.ndarray:
        eps = np.random.default_rng(seed).standard_normal((n,) + self.mu.shape)
        return self.mu + self.std * eps


@dataclass(frozen=True)
class ElboCfg:
    sigma_obs: float = 0.01
    mc_samples: int = 8

    def __post_init__(self):
        if self.sigma_obs <= 0 or self.mc_samples < 1:
            raise ValueError(f"invalid ELBO config {self}")


@dataclass
class RecognitionCfg:
    n_obs: int = 225
    Q: int = 20
    hidden: tuple = (256, 256)
    activation: str = "relu"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


class RecognitionNet:
    def __init__(self, cfg: RecognitionCfg, seed=0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        width = cfg.n_obs
        sizes = cfg.hidden + (2 * cfg.Q,)
        for i, f in enumerate(sizes):
            gain = np.sqrt(2.0) if i < len(cfg.hidden) else 0.1
            self.store.add(f"fc{i}.w", kaiming_normal(rng, (f, width), width, gain))
            self.store.add(f"fc{i}.b", np.zeros(f))
            width = f

    def forward(self, Y, pv=None):
        """``(B, n_obs)`` -> ``(mu Var (B, Q), log_var Var (B, Q))``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[-1] != self.cfg.n_obs:
            raise ShapeError(f"expected {self.cfg.n_obs} observations, got {Y.shape[-1]}")
        pv = pv if pv is not None else self.store.leaves(requires_grad=False)
        x = as_var(Y)
        n = len(self.cfg.hidden)
        for i in range(n + 1):
            x = ops.fully_connected(x, pv[f"fc{i}.w"], pv[f"fc{i}.b"])
            if i < n:
                x = ops.activation(x, self.cfg.activation)
        Q = self.cfg.Q
        mu = ops.take(x, np.arange(Q), axis=-1)
        log_var = ops.clip(ops.take(x, np.arange(Q, 2 * Q), axis=-1), *LOG_VAR_RANGE)
        return mu, log_var


def recognition_forward(Y, net: RecognitionNet) -> PosteriorGaussian:
    mu, lv = net.forward(Y)
    squeeze = np.ndim(Y) == 1
    return PosteriorGaussian(mu.value[0] if squeeze else mu.value, lv.value[0] if squeeze else lv.value)


# forward maps ---------------------------------------------------------------------------


class LinearForward:
    """``z -> G z`` (the conjugate toy problem)."""

    def __init__(self, G):
        self.G = np.asarray(G, dtype=float)

    def __call__(self, z):
        return ops.matmul(z, self.G.T)


class SurrogateForward:
    """``z -> surrogate(exp(m + sum sqrt(lambda_j) z_j g_j))`` at the sensors."""

    def __init__(self, model, kle: KleModel, layout: SensorLayout):
        if kle.grid.free_shape != layout.grid.free_shape:
            raise ShapeError("KLE and sensor layout live on different grids")
        self.model, self.kle, self.layout = model, kle, layout
        self.modes_free = kle.scaled_modes[kle.grid.free_nodes]  # (n_free, Q)

    def __call__(self, z):
        logK = ops.add(ops.matmul(z, self.modes_free.T), self.kle.m)
        u = self.model.forward_free_field(ops.exp(logK))
        return ops.take(u, self.layout.indices, axis=-1)


def elbo(Y, net: RecognitionNet, forward, cfg: ElboCfg, seed=0, pv=None, mean: bool = True):
    """Monte-Carlo ELBO for each row of ``Y`` (averaged over rows if ``mean``).

    ``eps`` is drawn from ``seed`` so the value is a deterministic function of
    (parameters, seed).  Returns a tape Var to be maximized.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    B, n_obs = Y.shape
    mu, log_var = net.forward(Y, pv)
    Q = mu.value.shape[-1]
    S = cfg.mc_samples
    eps = np.random.default_rng(seed).standard_normal((S, B, Q))
    z = ops.add(mu, ops.mul(ops.exp(ops.scale(log_var, 0.5)), eps))  # (S, B, Q)
    pred = forward(ops.reshape(z, (S * B, Q)))
    resid = ops.sub(ops.reshape(pred, (S, B, n_obs)), Y)
    s2 = cfg.sigma_obs ** 2
    const = -0.5 * n_obs * (ops.LOG_2PI + np.log(s2))
    loglik = ops.add(ops.scale(ops.sum(ops.square(resid), axis=(0, 2)), -0.5 / (s2 * S)), const)  # (B,)
    out = ops.sub(loglik, ops.gaussian_kl(mu, log_var))
    return ops.mean(out) if mean else out


@dataclass
class VaeTrainCfg:
    steps: int = 2000
    batch_size: int = 32
    lr0: float = 1e-3
    lr_floor: float = 1e-4
    elbo: ElboCfg = field(default_factory=ElboCfg)


def train_vae(Ys, forward, net: RecognitionNet, cfg: VaeTrainCfg, seed=0, callback=None):
    """Maximize the ELBO over the rows of ``Ys`` by Adam; only ``net`` is updated.

    Returns the history of per-step ELBO values.  A non-finite ELBO aborts.
    """
    Ys = np.atleast_2d(np.asarray(Ys, dtype=float))
    ss = np.random.SeedSequence(seed)
    batch_rng = np.random.default_rng(ss.spawn(1)[0])
    adam = AdamState()
    sched = CosineSchedule(cfg.lr0, cfg.steps, cfg.lr_floor)
    history = []
    for step in range(cfg.steps):
        idx = batch_rng.choice(len(Ys), size=min(cfg.batch_size, len(Ys)), replace=False)
        with Tape() as tape:
            pv = net.store.leaves()
            val = elbo(Ys[idx], net, forward, cfg.elbo, seed=[int(seed), step], pv=pv)
            tape.backward(ops.scale(val, -1.0))
        if not np.isfinite(val.value):
            raise TrainingError(f"ELBO became non-finite at step {step}")
        adam_step(net.store.params, ParamStore.grads(pv), adam, cosine_lr(step, sched))
        history.append(float(val.value))
        if callback is not None:
            callback(step, history[-1])
    return history


def posterior_field_stats(kle: KleModel, q: PosteriorGaussian, M: int = 1024, seed=0):
    """Monte-Carlo mean and variance (``1/M`` normalization) of ``K(z)``, ``z ~ q``."""
    if M < 1:
        raise ValueError("need at least one draw")
    z = q.sample(M, seed)
    logK = kle.m + z @ kle.scaled_modes.T  # (M, n_nodes)
    K = np.exp(logK)
    mean = K.mean(axis=0)
    var = np.mean((K - mean) ** 2, axis=0)
    shape = (kle.grid.ny, kle.grid.nx)
    return mean.reshape(shape), var.reshape(shape)


# conjugate oracles ------------------------------------------------------------------


def linear_gaussian_posterior(G, y, sigma_obs: float):
    """Exact posterior of ``z ~ N(0, I)``, ``y = G z + N(0, sigma^2 I)``: ``(mean, cov)``."""
    G = np.asarray(G, dtype=float)
    cov = np.linalg.inv(G.T @ G / sigma_obs ** 2 + np.eye(G.shape[1]))
    return cov @ G.T @ np.asarray(y) / sigma_obs ** 2, cov


def linear_gaussian_evidence(G, y, sigma_obs: float) -> float:
    """``log p(y)`` with ``y ~ N(0, G G^T + sigma^2 I)``."""
    G = np.asarray(G, dtype=float)
    C = G @ G.T + sigma_obs ** 2 * np.eye(G.shape[0])
    sign, logdet = np.linalg.slogdet(C)
    y = np.asarray(y, dtype=float)
    return float(-0.5 * (y @ np.linalg.solve(C, y) + logdet + len(y) * ops.LOG_2PI))


def gaussian_kl_mc(q: PosteriorGaussian, n: int, seed=0) -> float:
    """Monte-Carlo estimate of ``E_q[log q - log p]`` against ``N(0, I)``."""
    z = q.sample(n, seed)
    lq = -0.5 * np.sum((z - q.mu) ** 2 / np.exp(q.log_var) + q.log_var + ops.LOG_2PI, axis=-1)
    lp = -0.5 * np.sum(z ** 2 + ops.LOG_2PI, axis=-1)
    return float(np.mean(lq - lp))


def linear_gaussian_elbo(G, y, sigma_obs: float, q: PosteriorGaussian) -> float:
    """Exact ELBO of a diagonal ``q`` for the linear problem (no Monte Carlo)."""
    G = np.asarray(G, dtype=float)
    y = np.asarray(y, dtype=float)
    s2 = sigma_obs ** 2
    var = np.exp(q.log_var)
    fit = np.sum((y - G @ q.mu) ** 2) + np.sum(np.sum(G * G, axis=0) * var)
    loglik = -0.5 * len(y) * (ops.LOG_2PI + np.log(s2)) - 0.5 * fit / s2
    kl = 0.5 * np.sum(var + q.mu ** 2 - 1.0 - q.log_var)
    return float(loglik - kl)
