"""Differentiable primitives.

All arrays are float64.  Image tensors use NCHW layout.
"""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from ..errors import ShapeError
from .tape import as_var, record


# elementwise / linear algebra ----------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    return record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float):
    a = as_var(a)
    return record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """``a @ b`` with numpy broadcasting over leading batch axes."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def vjp(g):
        if bv.ndim == 1:
            return g[..., None] * bv, np.einsum("...ij,...i->...j", av, g)
        if av.ndim == 1:
            return (bv @ g[..., None])[..., 0], av[:, None] * g[..., None, :]
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return record(av @ bv, (a, b), vjp)


def sum(a, axis=None):
    a = as_var(a)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return record(a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis=None):
    a = as_var(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / n)


def square(a):
    a = as_var(a)
    av = a.value
    return record(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a):
    a = as_var(a)
    out = np.exp(a.value)
    return record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_var(a)
    av = a.value
    return record(np.log(av), (a,), lambda g: (g / av,))


def reshape(a, shape):
    a = as_var(a)
    old = a.value.shape
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_var(a)
    inv = np.argsort(axes)
    return record(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, index, axis=-1):
    """Gather ``a[..., index]`` along ``axis``."""
    a = as_var(a)
    index = np.asarray(index)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * (axis % len(shape)) + (index,), g)
        return (out,)

    return record(np.take(a.value, index, axis=axis), (a,), vjp)


def clip(a, lo, hi):
    a = as_var(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# activations ------------------------------------------------------------------------


def relu(a):
    a = as_var(a)
    mask = a.value > 0
    return record(a.value * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_var(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return record(out, (a,), lambda g: (g * sig,))


def tanh(a):
    a = as_var(a)
    out = np.tanh(a.value)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


ACTIVATIONS = {"relu": relu, "softplus": softplus, "tanh": tanh, "linear": lambda a: as_var(a)}


def activation(a, kind: str = "relu"):
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None
    return fn(a)


# layers ---------------------------------------------------------------------------------


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for 'same' convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, w, b, stride: int = 1):
    """Zero-padded 'same' convolution (cross-correlation); output ``ceil(H/stride)``."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {xv.shape}, {wv.shape}")
    B, C, H, W = xv.shape
    Co, Ci, kh, kw = wv.shape
    if Ci != C:
        raise ShapeError(f"kernel expects {Ci} input channels, input has {C}")
    ho, pt, pb = same_padding(H, kh, stride)
    wo, pl, pr = same_padding(W, kw, stride)
    xp = np.pad(xv, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xv
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wm = wv.reshape(Co, -1)
    out = (cols @ wm.T + b.value).reshape(B, ho, wo, Co).transpose(0, 3, 1, 2)
    padded_shape = xp.shape

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (gm.T @ cols).reshape(wv.shape)
        gb = gm.sum(axis=0)
        dcols = gm @ wm
        dxp = kernels.col2im(dcols, padded_shape, kh, kw, stride, ho, wo)
        return dxp[:, :, pt : pt + H, pl : pl + W], gw, gb

    return record(np.ascontiguousarray(out), (x, w, b), vjp)


class BNState:
    """Running statistics of one batch-normalization layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x, gamma, beta, state: BNState, train: bool = True, update: bool = True):
    """Per-channel batch normalization over (N, H, W)."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    xv = x.value
    if xv.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        axes, bshape = (0,), (1, -1)
    gv = gamma.value.reshape(bshape)
    if train:
        if xv.shape[0] < 2:
            raise ShapeError("batch normalization in train mode needs a batch of at least 2")
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        if update:
            m = state.momentum
            state.mean = m * state.mean + (1 - m) * mu
            state.var = m * state.var + (1 - m) * var
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gv * xhat + beta.value.reshape(bshape)
    m_count = xv.size // xv.shape[1]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gv
        if train:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = inv.reshape(bshape) / m_count * (m_count * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), vjp)


def fully_connected(x, W, b):
    """``x @ W.T + b`` with ``W`` of shape ``(out, in)``."""
    x, W, b = as_var(x), as_var(W), as_var(b)
    xv, Wv = x.value, W.value
    if xv.shape[-1] != Wv.shape[1]:
        raise ShapeError(f"input width {xv.shape[-1]} does not match weight {Wv.shape}")

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        return (g @ Wv, g2.T @ x2, g2.sum(axis=0))

    return record(xv @ Wv.T + b.value, (x, W, b), vjp)


def gaussian_kl(mu, log_var):
    """Closed-form ``KL(N(mu, diag exp(log_var)) || N(0, I))`` summed over the last axis."""
    mu, log_var = as_var(mu), as_var(log_var)
    mv, lv = mu.value, log_var.value
    out = 0.5 * np.sum(np.exp(lv) + mv * mv - 1.0 - lv, axis=-1)

    def vjp(g):
        g = np.expand_dims(g, -1)
        return g * mv, 0.5 * g * (np.exp(lv) - 1.0)

    return record(out, (mu, log_var), vjp)


LOG_2PI = math.log(2 * math.pi)
