"""Basis network: a stride-1 CNN that emits ``N`` basis functions per input field.

The network is a stack of ``conv -> batchnorm -> activation`` blocks with
'same' zero padding followed by a linear 1x1 convolution to ``N`` channels.
Each output channel, flattened row-major, is one column of ``P_N(K)``.
Training pushes ``P_N(K)`` through the Galerkin activation and minimizes
the ``h^2``-scaled squared misfit plus ``lambda_G * cond_F(A_N)^2``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import galerkin as gal
from .autodiff import ops
from .autodiff.optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .autodiff.params import ParamStore, kaiming_normal
from .autodiff.tape import Tape
from .dataset import RomDataset, dihedral_sample
from .errors import ShapeError, TrainingError
from .fem import relative_test_mean_error

log = logging.getLogger(__name__)


@dataclass
class BasisNetCfg:
    free_shape: tuple = (15, 15)
    channels: tuple = (8, 8, 16, 16, 32, 32)
    kernel: int = 7
    N: int = 5
    lambda_g: float = 1e-6
    activation: str = "relu"
    input_transform: str = "none"
    batch_size: int = 32
    epochs: int = 100
    lr0: float = 1e-4
    lr_floor: float = 0.0
    symmetrize: bool = False
    max_skip_rate: float = 0.5
    augment: bool = False  # random symmetry of the square per sample and step

    def __post_init__(self):
        self.free_shape = tuple(int(s) for s in self.free_shape)
        self.channels = tuple(int(c) for c in self.channels)
        if self.N < 1 or self.kernel % 2 == 0 or self.lambda_g < 0:
            raise ValueError(f"invalid basis net config: N={self.N}, kernel={self.kernel}, "
                             f"lambda_g={self.lambda_g}")

    @classmethod
    def full_scale(cls, free_shape=(59, 59)) -> "BasisNetCfg":
        """Full-size architecture: 25x25 kernels, 32..128 channels, N = 10."""
        return cls(free_shape=free_shape, channels=(32, 32, 64, 64, 128, 128), kernel=25, N=10)


def transform_input(K_img: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return K_img
    if kind == "log":
        return np.log(K_img)
    raise ValueError(f"unknown input transform {kind!r}")


def conv_block_params(store: ParamStore, name: str, cin: int, cout: int, k: int, rng):
    store.add(f"{name}.w", kaiming_normal(rng, (cout, cin, k, k), cin * k * k))
    store.add(f"{name}.b", np.zeros(cout))
    store.add_bn(f"{name}.bn", cout)


def conv_block(x, pv, store: ParamStore, name: str, act: str, train: bool, stride: int = 1,
               update: bool = True):
    y = ops.conv2d(x, pv[f"{name}.w"], pv[f"{name}.b"], stride)
    y = ops.batchnorm(y, pv[f"{name}.bn.gamma"], pv[f"{name}.bn.beta"], store.bn[f"{name}.bn"],
                      train, update)
    return ops.activation(y, act)


class BasisNet:
    def __init__(self, cfg: BasisNetCfg, seed=0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        cin = 1
        for i, c in enumerate(cfg.channels):
            conv_block_params(self.store, f"block{i}", cin, c, cfg.kernel, rng)
            cin = c
        self.store.add("head.w", kaiming_normal(rng, (cfg.N, cin, 1, 1), cin, gain=1.0))
        self.store.add("head.b", np.zeros(cfg.N))

    @property
    def n_free(self) -> int:
        return int(np.prod(self.cfg.free_shape))

    def forward(self, K_img, pv=None, train: bool = False, update: bool = True):
        """``(B, H, W)`` permeability images -> basis Var of shape ``(B, H*W, N)``."""
        K_img = np.asarray(K_img, dtype=float)
        if K_img.ndim == 2:
            K_img = K_img[None]
        if K_img.shape[1:] != self.cfg.free_shape:
            raise ShapeError(f"input {K_img.shape[1:]} does not match configured {self.cfg.free_shape}")
        x = transform_input(K_img, self.cfg.input_transform)[:, None]
        return self.forward_tensor(x, pv, train, update)

    def forward_tensor(self, x, pv=None, train=False, update=True):
        """Same as :meth:`forward` for an already transformed ``(B, 1, H, W)`` input (Var or array)."""
        pv = pv if pv is not None else self.store.leaves(requires_grad=False)
        for i in range(len(self.cfg.channels)):
            x = conv_block(x, pv, self.store, f"block{i}", self.cfg.activation, train, 1, update)
        y = ops.conv2d(x, pv["head.w"], pv["head.b"], 1)  # (B, N, H, W)
        B = y.value.shape[0]
        y = ops.reshape(y, (B, self.cfg.N, self.n_free))
        return ops.transpose(y, (0, 2, 1))

    def basis(self, K_img) -> np.ndarray:
        """Eval-mode basis matrices as a plain ``(B, n, N)`` array."""
        return self.forward(K_img, train=False).value


def basis_loss(net: BasisNet, K_img, u, As, Fs, pv, lambda_g: float, h2: float,
               train: bool = True, update: bool = True):
    """Batch loss ``mean h^2 |u - u_hat|^2 + lambda_G mean cond_F(A_N)^2``.

    Samples whose reduced matrix is singular are dropped from both means.
    Returns ``(loss Var, info dict)``.
    """
    P = net.forward(K_img, pv, train=train, update=update)
    u_hat, caches = gal.galerkin(P, As, Fs, symmetrize=net.cfg.symmetrize)
    keep = np.array([not c.skipped for c in caches])
    if not keep.any():
        return None, {"skipped": len(caches), "cond": np.nan}
    idx = np.flatnonzero(keep)
    diff = ops.sub(ops.take(u_hat, idx, axis=0), np.asarray(u)[idx])
    misfit = ops.scale(ops.sum(ops.square(diff)), h2 / len(idx))
    loss = misfit
    cond = np.nan
    if lambda_g > 0:
        A_N = gal.reduced_matrix(ops.take(P, idx, axis=0), [As[i] for i in idx])
        c = gal.cond_frobenius_op(A_N)
        cond = float(np.mean(c.value))
        loss = ops.add(misfit, ops.scale(ops.mean(ops.square(c)), lambda_g))
    return loss, {"skipped": int((~keep).sum()), "cond": cond, "misfit": float(misfit.value)}


def predict_galerkin(net: BasisNet, data: RomDataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode ``u_hat`` for every sample (zero rows where the reduced system is singular)."""
    out = np.zeros_like(data.u)
    imgs = data.free_images()
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        P = net.basis(imgs[sl])
        for b in range(P.shape[0]):
            out[s + b], _ = gal.galerkin_activation(P[b], data.A[s + b], data.F[s + b],
                                                    net.cfg.symmetrize, raise_on_singular=False)
    return out


def evaluate(net: BasisNet, data: RomDataset) -> float:
    return relative_test_mean_error(predict_galerkin(net, data), data.u)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_eps: float = np.inf

    def as_rows(self):
        return list(self.epochs)


def _step_seeds(seed):
    ss = np.random.SeedSequence(seed)
    init, shuffle = ss.spawn(2)
    return init, shuffle


def train_basis(train: RomDataset, cfg: BasisNetCfg, seed=0, val: RomDataset | None = None,
                net: BasisNet | None = None, callback=None):
    """Adam + cosine decay on the Galerkin loss; returns ``(net, history)``.

    When ``val`` is given the parameters with the lowest validation error are
    restored at the end.
    """
    init_seed, shuffle_seed = _step_seeds(seed)
    net = net or BasisNet(cfg, np.random.default_rng(init_seed))
    rng = np.random.default_rng(shuffle_seed)
    M = len(train)
    steps_per_epoch = -(-M // cfg.batch_size)
    schedule = CosineSchedule(cfg.lr0, cfg.epochs * steps_per_epoch, cfg.lr_floor)
    adam = AdamState()
    h2 = train.grid.hx * train.grid.hy
    imgs = train.free_images()
    hist = History()
    best_state = None
    fixed = np.arange(min(cfg.batch_size, M))
    step = 0
    if val is not None:
        hist.epochs.append({"epoch": 0, "train_loss": np.nan, "val_eps": evaluate(net, val),
                            "lr": cfg.lr0, "skipped": 0, "cond_fixed": _fixed_cond(net, train, fixed)})
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(M)
        total, count, skipped = 0.0, 0, 0
        for s in range(0, M, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if len(idx) < 2:
                continue
            lr = cosine_lr(step, schedule)
            batch = _batch(train, imgs, idx, rng if cfg.augment else None)
            with Tape() as tape:
                pv = net.store.leaves()
                loss, info = basis_loss(net, *batch, pv, cfg.lambda_g, h2)
                skipped += info["skipped"]
                if loss is not None:
                    tape.backward(loss)
            if loss is not None:
                if not np.isfinite(loss.value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
                adam_step(net.store.params, ParamStore.grads(pv), adam, lr)
                total += float(loss.value) * len(idx)
                count += len(idx)
            step += 1
        if skipped > cfg.max_skip_rate * M:
            raise TrainingError(f"epoch {epoch}: {skipped}/{M} samples skipped for singular reduced "
                                f"matrices (limit {cfg.max_skip_rate:.0%})")
        row = {"epoch": epoch, "train_loss": total / max(count, 1), "lr": lr, "skipped": skipped,
               "cond_fixed": _fixed_cond(net, train, fixed)}
        if val is not None:
            row["val_eps"] = evaluate(net, val)
            if row["val_eps"] < hist.best_eps:
                hist.best_eps, hist.best_epoch = row["val_eps"], epoch
                best_state = {k: v.copy() for k, v in net.store.state_dict().items()}
        row["seconds"] = time.perf_counter() - t0
        hist.epochs.append(row)
        log.info("basis epoch %d loss %.4e val %s (%.1fs)", epoch, row["train_loss"],
                 row.get("val_eps"), row["seconds"])
        if callback is not None:
            callback(row)
    if best_state is not None:
        net.store.load_state_dict(best_state)
    return net, hist


def _batch(data: RomDataset, imgs, idx, rng=None):
    """``(K_img, u, As, Fs)`` for a batch, randomly transformed by square symmetries if ``rng``."""
    if rng is None:
        return imgs[idx], data.u[idx], [data.A[i] for i in idx], data.F[idx]
    H, W = data.grid.free_shape
    ts = rng.integers(0, 8, size=len(idx)) if H == W else 2 * rng.integers(0, 4, size=len(idx))
    parts = [dihedral_sample(data, i, int(t)) for i, t in zip(idx, ts)]
    return (np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]), [p[2] for p in parts],
            np.stack([p[3] for p in parts]))


def _fixed_cond(net, data, idx):
    P = net.basis(data.free_images()[idx])
    vals = []
    for b, i in enumerate(idx):
        A_N = P[b].T @ (data.A[i] @ P[b])
        try:
            vals.append(gal.cond_frobenius(A_N))
        except Exception:
            vals.append(np.inf)
    return float(np.mean(vals))


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def loss_gradcheck(net: BasisNet, data: RomDataset, lambda_g: float | None = None, eps: float = 1e-5) -> float:
    """Max relative error of the full training-loss gradient against central differences.

    BN runs in train mode without touching running statistics; parameters are
    restored afterwards.
    """
    from .autodiff.gradcheck import grad_check

    lam = net.cfg.lambda_g if lambda_g is None else lambda_g
    h2 = data.grid.hx * data.grid.hy
    saved = dict(net.store.params)

    def fun(params):
        net.store.params = dict(params)
        with Tape() as tape:
            pv = net.store.leaves()
            loss, _ = basis_loss(net, data.free_images(), data.u, data.A, data.F, pv, lam, h2,
                                 train=True, update=False)
            tape.backward(loss)
        return float(loss.value), ParamStore.grads(pv)

    try:
        return grad_check(fun, {k: v.copy() for k, v in saved.items()}, eps=eps)
    finally:
        net.store.params = saved
