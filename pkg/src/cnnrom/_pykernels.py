"""Numpy implementations of the kernels in ``_ckernels.pyx``.

Both modules expose the same three functions with identical results; the
compiled one is preferred when importable.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, ho, wo, kh, kw) -> (B, ho, wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * ho * wo, C * kh * kw
    )


def col2im(cols, B, C, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((B, C, hp, wp))
    c6 = cols.reshape(B, ho, wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di : di + stride * (ho - 1) + 1 : stride,
                dj : dj + stride * (wo - 1) + 1 : stride] += c6[..., di, dj]
    return out


def scatter_add(index, weights, size):
    return np.bincount(index, weights=weights, minlength=size).astype(np.float64)
