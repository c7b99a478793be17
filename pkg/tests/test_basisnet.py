import numpy as np
import pytest

from cnnrom import fem
from cnnrom.basisnet import (BasisNet, BasisNetCfg, _batch, evaluate, loss_gradcheck,
                             predict_galerkin, train_basis, transform_input)
from cnnrom.dataset import GeneratorSpec, generate
from cnnrom.errors import ShapeError


@pytest.fixture(scope="module")
def data():
    g = fem.build_grid(7, 7)
    ds, _ = generate(g, GeneratorSpec(r=0.2, n=3), "darcy", range(6))
    return ds


def tiny_cfg(**kw):
    base = dict(free_shape=(5, 5), channels=(2,), kernel=3, N=2, activation="softplus",
                batch_size=3, epochs=2, lr0=1e-3)
    base.update(kw)
    return BasisNetCfg(**base)


def test_output_shape(data):
    net = BasisNet(tiny_cfg(), 0)
    P = net.basis(data.free_images()[:2])
    assert P.shape == (2, 25, 2)
    with pytest.raises(ShapeError):
        net.basis(np.ones((2, 4, 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(kernel=4)
    with pytest.raises(ValueError):
        tiny_cfg(N=0)
    assert BasisNetCfg.full_scale().kernel == 25
    with pytest.raises(ValueError):
        transform_input(np.ones(2), "sqrt")


@pytest.mark.parametrize("seed", range(3))
def test_full_loss_gradient(data, seed):
    net = BasisNet(tiny_cfg(), seed)
    before = {k: v.copy() for k, v in net.store.params.items()}
    err = loss_gradcheck(net, data.subset([0, 1, 2]), lambda_g=1e-2)
    assert err < 1e-5
    assert all(np.array_equal(before[k], net.store.params[k]) for k in before)


def test_training_is_deterministic(data):
    cfg = tiny_cfg(augment=True)
    n1, h1 = train_basis(data, cfg, seed=3, val=data)
    n2, h2 = train_basis(data, cfg, seed=3, val=data)
    for k in n1.store.params:
        assert np.array_equal(n1.store.params[k], n2.store.params[k])
    assert h1.as_rows()[-1]["train_loss"] == h2.as_rows()[-1]["train_loss"]
    assert len(h1.epochs) == cfg.epochs + 1


def test_predictions_finite_and_error_reported(data):
    net, _ = train_basis(data, tiny_cfg(), seed=0)
    u = predict_galerkin(net, data)
    assert u.shape == data.u.shape and np.all(np.isfinite(u))
    assert 0 <= evaluate(net, data) < 10


def test_batch_augmentation_consistent(data):
    imgs = data.free_images()
    idx = np.array([0, 1, 2, 3])
    K, u, As, Fs = _batch(data, imgs, idx, np.random.default_rng(0))
    for b in range(4):
        assert abs(As[b] @ u[b] - Fs[b]).max() <= 1e-9 * np.abs(Fs[b]).max()
    K0, u0, _, _ = _batch(data, imgs, idx)
    assert np.array_equal(u0, data.u[idx])
