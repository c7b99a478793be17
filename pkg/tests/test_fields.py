import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnnrom import fields
from cnnrom.errors import ShapeError
from cnnrom.fem import build_grid


def test_binomial_field_two_valued_and_reproducible():
    g = build_grid(33, 33)
    cfg = fields.BinomialProcessCfg()
    K = fields.sample_binomial_field(cfg, g, 5)
    assert set(np.unique(K)) <= {1.0, 1000.0}
    assert np.array_equal(K, fields.sample_binomial_field(cfg, g, 5))


def test_binomial_disc_geometry():
    g = build_grid(21, 21)
    cfg = fields.BinomialProcessCfg(n=1, r=0.1)
    K = fields.binomial_field_from_centers([[0.5, 0.5]], cfg, g)
    X, Y = g.coords
    inside = np.hypot(X - 0.5, Y - 0.5) <= 0.1
    assert np.array_equal(K == 1000.0, inside)
    assert np.all(fields.binomial_field_from_centers(np.empty((0, 2)), cfg, g) == 1.0)


def test_binomial_invalid():
    with pytest.raises(ValueError):
        fields.BinomialProcessCfg(r=0.0)


def test_kle_modes_orthonormal_and_sorted():
    g = build_grid(11, 11)
    kle = fields.build_kle(g, 0.2, Q=15)
    assert np.abs(kle.modes.T @ kle.modes - np.eye(15)).max() < 1e-10
    assert np.all(np.diff(kle.lambdas) <= 0)
    var = np.sum(kle.lambdas * kle.modes**2, axis=1)
    assert np.all(var <= 1 + 1e-10)


def test_kle_full_rank_reproduces_covariance():
    g = build_grid(5, 5)
    kle = fields.build_kle(g, 0.3, Q=g.n_nodes)
    np.testing.assert_allclose(kle.covariance(), fields.covariance_matrix(g, 0.3), atol=1e-10)


def test_kle_infinite_length_is_constant_mode():
    g = build_grid(6, 6)
    kle = fields.build_kle(g, np.inf, Q=1)
    assert kle.lambdas[0] == pytest.approx(g.n_nodes)
    logK = kle.log_field(np.array([0.7]))
    assert np.ptp(logK) < 1e-12


def test_grf_seed_and_mean():
    g = build_grid(9, 9)
    kle = fields.build_kle(g, 0.1, m=1.5, Q=5)
    assert np.array_equal(fields.sample_grf(kle, 3), fields.sample_grf(kle, 3))
    np.testing.assert_allclose(fields.sample_grf(kle, z=np.zeros(5)), np.exp(1.5))
    with pytest.raises(ShapeError):
        kle.log_field(np.zeros(4))


def test_patch_counts_and_order():
    img = np.arange(20 * 20, dtype=float).reshape(20, 20)
    cfg = fields.ChannelPatchCfg(patch=8, stride=4, flip=True, rotations=1)
    out = fields.extract_patches(img, cfg)
    n_win = ((20 - 8) // 4 + 1) ** 2
    assert len(out) == 3 * n_win
    assert np.array_equal(out[0], img[:8, :8])
    assert np.array_equal(out[n_win], img[:8, :8][:, ::-1])
    assert np.array_equal(out[2 * n_win], fields.rotate90(img[:8, :8], 1))


def test_patch_count_for_large_image():
    # every full 64 px window at a 16 px step of a 2500 px image: 153 per axis
    n = (2500 - 64) // 16 + 1
    assert n * n == 23409
    cfg = fields.ChannelPatchCfg(patch=64, stride=16, flip=True)
    assert len(fields.extract_patches(np.zeros((304, 304)), cfg)) == 2 * 16 * 16


def test_patch_too_large():
    with pytest.raises(ShapeError):
        fields.extract_patches(np.ones((4, 4)), fields.ChannelPatchCfg(patch=8, stride=1))


def test_rotation_is_clockwise():
    a = np.array([[1, 2], [3, 4]])
    assert np.array_equal(fields.rotate90(a, 1), [[3, 1], [4, 2]])
    with pytest.raises(ShapeError):
        fields.rotate90(np.ones((2, 3)))


def test_channel_image():
    img = fields.synth_channel_image(64, 3, 4, seed=1)
    assert img.shape == (64, 64)
    assert set(np.unique(img)) == {1.0, 1000.0}
    assert np.array_equal(img, fields.synth_channel_image(64, 3, 4, seed=1))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(0, 7))
def test_four_rotations_identity(n, t):
    a = np.random.default_rng(n).standard_normal((n, n))
    assert np.array_equal(fields.rotate90(fields.rotate90(a, t), 4 - t % 4), a)


@pytest.mark.parametrize("i", range(4))
def test_grf_derivative_in_z(i):
    g = build_grid(7, 7)
    kle = fields.build_kle(g, 0.2, m=0.3, Q=4)
    z = np.random.default_rng(i).standard_normal(4)
    K = fields.sample_grf(kle, z=z)
    analytic = kle.scaled_modes[:, i].reshape(7, 7) * K
    e = np.eye(4)[i] * 1e-5
    fd = (fields.sample_grf(kle, z=z + e) - fields.sample_grf(kle, z=z - e)) / 2e-5
    assert np.max(np.abs(fd - analytic) / np.maximum(np.abs(analytic), 1e-3 * np.abs(analytic).max())) < 1e-6
