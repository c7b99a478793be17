"""Coefficient network and the assembled surrogate ``u~(K) = P_N(K) c(K)``.

The coefficient network is a strided convolutional encoder followed by a
fully connected stack ending in ``N`` linear outputs.  It is trained against
a frozen basis network, after which prediction needs neither a stiffness
matrix nor a load vector nor any iteration.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .autodiff.params import ParamStore, kaiming_normal
from .autodiff.tape import Tape
from .basisnet import BasisNet, History, _batch, conv_block, conv_block_params, transform_input
from .dataset import RomDataset
from .errors import ShapeError, TrainingError
from .fem import Grid2D, relative_test_mean_error
from .autodiff.ops import same_padding

log = logging.getLogger(__name__)


@dataclass
class CoefNetCfg:
    free_shape: tuple = (15, 15)
    channels: tuple = (8, 8, 16, 16, 32, 32)
    strides: tuple = (1, 2, 1, 2, 1, 2)
    kernel: int = 7
    fc: tuple = (64, 64)
    N: int = 5
    activation: str = "relu"
    input_transform: str = "none"
    batch_size: int = 32
    epochs: int = 100
    lr0: float = 1e-4
    lr_floor: float = 0.0
    augment: bool = False  # random square symmetry per sample and step; bases are re-predicted

    def __post_init__(self):
        self.free_shape = tuple(int(s) for s in self.free_shape)
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.fc = tuple(int(f) for f in self.fc)
        if len(self.strides) != len(self.channels):
            raise ValueError("need one stride per conv block")

    @classmethod
    def full_scale(cls, free_shape=(63, 63)) -> "CoefNetCfg":
        return cls(free_shape=free_shape, channels=(32, 32, 64, 64, 128, 128), kernel=25,
                   fc=(300, 300), N=10)

    def feature_shapes(self) -> list[tuple[int, int]]:
        """Spatial size after each conv block (ceil division for stride 2)."""
        h, w = self.free_shape
        out = []
        for s in self.strides:
            h = same_padding(h, self.kernel, s)[0]
            w = same_padding(w, self.kernel, s)[0]
            out.append((h, w))
        return out


class CoefNet:
    def __init__(self, cfg: CoefNetCfg, seed=0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        cin = 1
        for i, c in enumerate(cfg.channels):
            conv_block_params(self.store, f"block{i}", cin, c, cfg.kernel, rng)
            cin = c
        h, w = cfg.feature_shapes()[-1]
        width = cin * h * w
        for i, f in enumerate(cfg.fc + (cfg.N,)):
            gain = np.sqrt(2.0) if i < len(cfg.fc) else 1.0
            self.store.add(f"fc{i}.w", kaiming_normal(rng, (f, width), width, gain))
            self.store.add(f"fc{i}.b", np.zeros(f))
            width = f

    def forward(self, K_img, pv=None, train=False, update=True):
        K_img = np.asarray(K_img, dtype=float)
        if K_img.ndim == 2:
            K_img = K_img[None]
        if K_img.shape[1:] != self.cfg.free_shape:
            raise ShapeError(f"input {K_img.shape[1:]} does not match configured {self.cfg.free_shape}")
        x = transform_input(K_img, self.cfg.input_transform)[:, None]
        return self.forward_tensor(x, pv, train, update)

    def forward_tensor(self, x, pv=None, train=False, update=True):
        pv = pv if pv is not None else self.store.leaves(requires_grad=False)
        for i, s in enumerate(self.cfg.strides):
            x = conv_block(x, pv, self.store, f"block{i}", self.cfg.activation, train, s, update)
        B = x.value.shape[0]
        x = ops.reshape(x, (B, -1))
        n_fc = len(self.cfg.fc)
        for i in range(n_fc + 1):
            x = ops.fully_connected(x, pv[f"fc{i}.w"], pv[f"fc{i}.b"])
            if i < n_fc:
                x = ops.activation(x, self.cfg.activation)
        return x

    def coefficients(self, K_img) -> np.ndarray:
        return self.forward(K_img).value


def coef_forward(K_img, net: CoefNet) -> np.ndarray:
    return net.coefficients(K_img)


@dataclass(eq=False)
class SurrogateModel:
    basis: BasisNet
    coef: CoefNet
    grid: Grid2D

    def __post_init__(self):
        if self.basis.cfg.free_shape != self.coef.cfg.free_shape:
            raise ShapeError("basis and coefficient nets disagree on the input resolution")
        if self.basis.cfg.N != self.coef.cfg.N:
            raise ShapeError("basis and coefficient nets disagree on N")
        if self.basis.cfg.free_shape != self.grid.free_shape:
            raise ShapeError("networks do not match the grid's free-node lattice")

    @property
    def N(self) -> int:
        return self.basis.cfg.N

    def forward_free_field(self, K_free):
        """Differentiable map from a ``(B, n_free)`` Var of permeabilities to ``u~`` ``(B, n_free)``.

        Both nets run in eval mode with their parameters as constants.
        """
        B = K_free.value.shape[0]
        H, W = self.grid.free_shape
        img = ops.reshape(K_free, (B, 1, H, W))
        xb = ops.log(img) if self.basis.cfg.input_transform == "log" else img
        xc = ops.log(img) if self.coef.cfg.input_transform == "log" else img
        P = self.basis.forward_tensor(xb, train=False)
        c = self.coef.forward_tensor(xc, train=False)
        u = ops.matmul(P, ops.reshape(c, (B, self.N, 1)))
        return ops.reshape(u, (B, -1))


def surrogate_predict(K, model: SurrogateModel) -> np.ndarray:
    """``P_N(K) c(K)`` for nodal ``(ny, nx)`` fields or a ``(B, ny, nx)`` stack.

    Takes only the permeability: no stiffness matrix, load vector or solve.
    """
    K = np.asarray(K, dtype=float)
    single = K.ndim == 2
    if single:
        K = K[None]
    img = K[:, 1:-1, 1:-1]
    P = model.basis.basis(img)
    c = model.coef.coefficients(img)
    u = np.einsum("bnk,bk->bn", P, c)
    return u[0] if single else u


def train_coef(train: RomDataset, basis: BasisNet, cfg: CoefNetCfg, seed=0,
               val: RomDataset | None = None, net: CoefNet | None = None, callback=None):
    """Fit ``c(K)`` so that ``P_N(K) c(K)`` matches ``u_h``; the basis net is not modified."""
    if cfg.N != basis.cfg.N:
        raise ShapeError(f"coefficient width {cfg.N} != basis count {basis.cfg.N}")
    init_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(2)
    net = net or CoefNet(cfg, np.random.default_rng(init_seed))
    rng = np.random.default_rng(shuffle_seed)
    imgs = train.free_images()
    P_all = None if cfg.augment else np.concatenate(
        [basis.basis(imgs[s : s + 64]) for s in range(0, len(train), 64)])
    M = len(train)
    steps = -(-M // cfg.batch_size) * cfg.epochs
    schedule = CosineSchedule(cfg.lr0, steps, cfg.lr_floor)
    adam = AdamState()
    h2 = train.grid.hx * train.grid.hy
    hist = History()
    best_state = None
    step = 0
    model = SurrogateModel(basis, net, train.grid)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(M)
        total, count = 0.0, 0
        for s in range(0, M, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if len(idx) < 2:
                continue
            lr = cosine_lr(step, schedule)
            if cfg.augment:
                K_b, u_b, _, _ = _batch(train, imgs, idx, rng)
                P_b = basis.basis(K_b)
            else:
                K_b, u_b, P_b = imgs[idx], train.u[idx], P_all[idx]
            with Tape() as tape:
                pv = net.store.leaves()
                loss = coef_loss(net, K_b, P_b, u_b, pv, h2)
                tape.backward(loss)
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite coefficient loss at epoch {epoch}")
            adam_step(net.store.params, ParamStore.grads(pv), adam, lr)
            total += float(loss.value) * len(idx)
            count += len(idx)
            step += 1
        row = {"epoch": epoch, "train_loss": total / max(count, 1), "lr": lr}
        if val is not None:
            row["val_eps"] = relative_test_mean_error(surrogate_predict(val.K, model), val.u)
            if row["val_eps"] < hist.best_eps:
                hist.best_eps, hist.best_epoch = row["val_eps"], epoch
                best_state = {k: v.copy() for k, v in net.store.state_dict().items()}
        row["seconds"] = time.perf_counter() - t0
        hist.epochs.append(row)
        log.info("coef epoch %d loss %.4e val %s", epoch, row["train_loss"], row.get("val_eps"))
        if callback is not None:
            callback(row)
    if best_state is not None:
        net.store.load_state_dict(best_state)
    return net, hist


def coef_loss(net: CoefNet, K_img, P, u, pv, h2: float, train: bool = True, update: bool = True):
    """``mean h^2 |u - P c(K)|^2`` with ``P`` held constant."""
    c = net.forward(K_img, pv, train=train, update=update)
    B = c.value.shape[0]
    u_t = ops.reshape(ops.matmul(np.asarray(P), ops.reshape(c, (B, net.cfg.N, 1))), (B, -1))
    return ops.scale(ops.sum(ops.square(ops.sub(u_t, np.asarray(u)))), h2 / B)
