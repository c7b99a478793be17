import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnnrom import fem, fields, vae
from cnnrom.autodiff import ops
from cnnrom.errors import ShapeError


def test_kl_closed_form_unit_variance():
    mu = np.array([[0.3, -1.2, 2.0]])
    kl = ops.gaussian_kl(mu, np.zeros_like(mu)).value
    assert kl[0] == pytest.approx(0.5 * np.sum(mu ** 2))


def test_kl_matches_monte_carlo():
    q = vae.PosteriorGaussian(np.array([0.5, -0.2, 1.0]), np.array([-1.0, 0.3, -0.5]))
    kl = float(ops.gaussian_kl(q.mu[None], q.log_var[None]).value[0])
    assert vae.gaussian_kl_mc(q, 100_000, seed=0) == pytest.approx(kl, rel=0.02)


@pytest.mark.parametrize("seed", range(3))
def test_elbo_bounded_by_evidence(seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((6, 3))
    y = rng.standard_normal(6)
    ev = vae.linear_gaussian_evidence(G, y, 0.3)
    for _ in range(5):
        q = vae.PosteriorGaussian(rng.standard_normal(3), rng.standard_normal(3))
        assert vae.linear_gaussian_elbo(G, y, 0.3, q) <= ev + 1e-12


def test_elbo_tight_for_diagonal_posterior():
    # orthogonal columns make the exact posterior diagonal
    G = np.linalg.qr(np.random.default_rng(1).standard_normal((8, 3)))[0] * np.array([2.0, 1.0, 0.5])
    y = np.random.default_rng(2).standard_normal(8)
    mean, cov = vae.linear_gaussian_posterior(G, y, 0.2)
    assert np.abs(cov - np.diag(np.diag(cov))).max() < 1e-12
    q = vae.PosteriorGaussian(mean, np.log(np.diag(cov)))
    assert vae.linear_gaussian_elbo(G, y, 0.2, q) == pytest.approx(vae.linear_gaussian_evidence(G, y, 0.2))


def test_monte_carlo_elbo_is_unbiased():
    rng = np.random.default_rng(3)
    G = rng.standard_normal((5, 2))
    net = vae.RecognitionNet(vae.RecognitionCfg(n_obs=5, Q=2, hidden=(4,)), 0)
    y = rng.standard_normal(5)
    cfg = vae.ElboCfg(sigma_obs=0.5, mc_samples=20000)
    mc = float(vae.elbo(y, net, vae.LinearForward(G), cfg, seed=0).value)
    exact = vae.linear_gaussian_elbo(G, y, 0.5, vae.recognition_forward(y, net))
    assert mc == pytest.approx(exact, rel=1e-2)


def test_recognition_shapes_and_clipping():
    net = vae.RecognitionNet(vae.RecognitionCfg(n_obs=4, Q=3, hidden=(5,)), 0)
    net.store.params["fc1.b"][3:] = 50.0
    q = vae.recognition_forward(np.ones(4), net)
    assert q.mu.shape == (3,)
    assert np.all(q.log_var <= vae.LOG_VAR_RANGE[1])
    with pytest.raises(ShapeError):
        net.forward(np.ones((2, 3)))


def test_sensor_layout():
    g = fem.build_grid(17, 17)
    lay = vae.sensor_layout(g, 3)
    assert lay.n_obs == 9 and len(set(lay.indices)) == 9
    with pytest.raises(ValueError):
        vae.sensor_layout(g, 16)
    full = vae.sensor_layout(g, 15)
    assert np.array_equal(np.sort(full.indices), np.arange(g.n_free))


def test_observation_noise_variance():
    g = fem.build_grid(12, 12)
    lay = vae.sensor_layout(g, 10)
    u = np.zeros((200, g.n_free))
    y = vae.observe(u, lay, 0.05, seed=0)
    assert y.shape == (200, 100)
    assert y.std() == pytest.approx(0.05, rel=0.03)
    assert np.array_equal(vae.observe(u[0], lay, 0.0), np.zeros(100))


def test_posterior_field_stats_lognormal():
    g = fem.build_grid(5, 5)
    kle = fields.build_kle(g, 0.5, m=0.2, Q=3)
    q = vae.PosteriorGaussian(np.array([0.4, -0.3, 0.1]), np.log(np.array([0.2, 0.1, 0.05])))
    mean, var = vae.posterior_field_stats(kle, q, M=200_000, seed=0)
    a = kle.scaled_modes
    m_log = kle.m + a @ q.mu
    v_log = (a ** 2) @ np.exp(q.log_var)
    np.testing.assert_allclose(mean.ravel(), np.exp(m_log + v_log / 2), rtol=5e-3)
    np.testing.assert_allclose(var.ravel(), (np.exp(v_log) - 1) * np.exp(2 * m_log + v_log), rtol=5e-2)


def test_training_increases_elbo_and_is_deterministic():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((6, 2))
    Ys = rng.standard_normal((30, 2)) @ G.T + 0.1 * rng.standard_normal((30, 6))
    cfg = vae.VaeTrainCfg(steps=150, batch_size=10, lr0=3e-3, elbo=vae.ElboCfg(0.1, 4))
    runs = []
    for _ in range(2):
        net = vae.RecognitionNet(vae.RecognitionCfg(n_obs=6, Q=2, hidden=(16,)), 1)
        runs.append(vae.train_vae(Ys, vae.LinearForward(G), net, cfg, seed=2))
    assert runs[0] == runs[1]
    assert np.mean(runs[0][-20:]) > np.mean(runs[0][:20])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10**6))
def test_linear_posterior_is_stationary(Q, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((5, Q))
    y = rng.standard_normal(5)
    mean, cov = vae.linear_gaussian_posterior(G, y, 0.4)
    # gradient of the log joint vanishes at the posterior mean
    grad = G.T @ (y - G @ mean) / 0.16 - mean
    assert np.abs(grad).max() < 1e-8 * max(1.0, np.abs(G.T @ y).max() / 0.16)
