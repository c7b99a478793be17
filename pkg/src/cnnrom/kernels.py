"""Kernel dispatch: compiled Cython core when available, numpy otherwise.

Set ``CNNROM_PURE=1`` in the environment to force the numpy fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "numpy"
_impl = _pykernels

if os.environ.get("CNNROM_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def im2col(xp, kh, kw, stride, ho, wo):
    """Unfold padded ``(B, C, Hp, Wp)`` input into ``(B*ho*wo, C*kh*kw)`` rows."""
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    return _impl.im2col(xp, int(kh), int(kw), int(stride), int(ho), int(wo))


def col2im(cols, shape, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    B, C, hp, wp = shape
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return _impl.col2im(cols, B, C, hp, wp, int(kh), int(kw), int(stride), int(ho), int(wo))


def scatter_add(index, weights, size):
    """``out[index[k]] += weights[k]`` in index order."""
    index = np.ascontiguousarray(index, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if index.shape != weights.shape or index.ndim != 1:
        raise ValueError("index and weights must be 1-D arrays of equal length")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError(f"scatter index outside [0, {size})")
    return _impl.scatter_add(index, weights, int(size))
