import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnnrom import _pykernels, kernels

try:
    from cnnrom import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_c = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def shapes(seed, stride):
    rng = np.random.default_rng(seed)
    B, C, k = rng.integers(1, 3), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
    ho, wo = rng.integers(1, 6, size=2)
    hp, wp = (ho - 1) * stride + k, (wo - 1) * stride + k
    return rng, int(B), int(C), k, int(ho), int(wo), int(hp), int(wp)


@needs_c
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_im2col_backends_agree(seed, stride):
    rng, B, C, k, ho, wo, hp, wp = shapes(seed, stride)
    xp = rng.standard_normal((B, C, hp, wp))
    a = _ckernels.im2col(xp, k, k, stride, ho, wo)
    b = _pykernels.im2col(xp, k, k, stride, ho, wo)
    assert np.array_equal(a, b)


@needs_c
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_col2im_backends_agree(seed, stride):
    rng, B, C, k, ho, wo, hp, wp = shapes(seed, stride)
    cols = rng.standard_normal((B * ho * wo, C * k * k))
    a = _ckernels.col2im(cols, B, C, hp, wp, k, k, stride, ho, wo)
    b = _pykernels.col2im(cols, B, C, hp, wp, k, k, stride, ho, wo)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_col2im_is_adjoint(seed, stride):
    rng, B, C, k, ho, wo, hp, wp = shapes(seed, stride)
    xp = rng.standard_normal((B, C, hp, wp))
    cols = rng.standard_normal((B * ho * wo, C * k * k))
    lhs = np.sum(kernels.im2col(xp, k, k, stride, ho, wo) * cols)
    rhs = np.sum(xp * kernels.col2im(cols, xp.shape, k, k, stride, ho, wo))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_c
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_scatter_add_backends_agree(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(1, 50))
    idx = rng.integers(0, size, size=int(rng.integers(0, 200))).astype(np.int64)
    w = rng.standard_normal(idx.size)
    np.testing.assert_allclose(_ckernels.scatter_add(idx, w, size), _pykernels.scatter_add(idx, w, size),
                               rtol=1e-13, atol=1e-13)


def test_scatter_add_checks_indices():
    with pytest.raises(IndexError):
        kernels.scatter_add(np.array([0, 3]), np.ones(2), 3)
    with pytest.raises(ValueError):
        kernels.scatter_add(np.array([0, 1]), np.ones(3), 3)
    assert np.array_equal(kernels.scatter_add(np.array([], dtype=np.int64), np.array([]), 2), [0.0, 0.0])


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "numpy")
    if _ckernels is not None and os.environ.get("CNNROM_PURE", "") not in ("1", "true", "yes"):
        assert kernels.BACKEND == "cython"
