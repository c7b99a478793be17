import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cnnrom import config, fem, io
from cnnrom.basisnet import BasisNet, BasisNetCfg
from cnnrom.coefnet import CoefNet, CoefNetCfg, SurrogateModel, surrogate_predict
from cnnrom.dataset import GeneratorSpec
from cnnrom.errors import FormatError


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float64, np.float32, np.uint8, np.uint64]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_tensor_roundtrip(arr):
    back = io.tensor_from_bytes(io.tensor_to_bytes(arr))
    assert back.shape == arr.shape and back.dtype == arr.dtype.newbyteorder("<")
    assert np.array_equal(back, arr, equal_nan=arr.dtype.kind == "f")


def test_tensor_header_layout():
    buf = io.tensor_to_bytes(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert buf[:4] == b"ROMT"
    assert buf[4:6] == (1).to_bytes(2, "little") and buf[6] == 0 and buf[7] == 2
    assert len(buf) == 8 + 16 + 48


def test_tensor_corruption():
    buf = io.tensor_to_bytes(np.ones(3))
    with pytest.raises(FormatError):
        io.tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        io.tensor_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        io.tensor_from_bytes(buf, np.uint8)
    with pytest.raises(FormatError):
        io.tensor_to_bytes(np.array([-1, 2]))
    assert io.tensor_from_bytes(io.tensor_to_bytes(np.array([3, 4]))).dtype == np.uint64


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    t = {"b": np.ones(2), "a": np.arange(3, dtype=np.uint64)}
    io.save_checkpoint(tmp_path / "x.ckpt", t, {"kind": "test", "n": 2})
    io.save_checkpoint(tmp_path / "y.ckpt", dict(reversed(list(t.items()))), {"n": 2, "kind": "test"})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    back, meta = io.load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"kind": "test", "n": 2}
    assert np.array_equal(back["a"], t["a"])
    (tmp_path / "z.ckpt").write_bytes(b"nope")
    with pytest.raises(FormatError):
        io.load_checkpoint(tmp_path / "z.ckpt")


def test_surrogate_checkpoint(tmp_path):
    g = fem.build_grid(7, 7)
    kw = dict(free_shape=(5, 5), kernel=3, N=2, input_transform="log")
    model = SurrogateModel(BasisNet(BasisNetCfg(channels=(2,), **kw), 0),
                           CoefNet(CoefNetCfg(channels=(2,), strides=(2,), fc=(3,), **kw), 1), g)
    io.save_surrogate(tmp_path / "s.ckpt", model)
    back, _ = io.load_surrogate(tmp_path / "s.ckpt")
    K = np.exp(np.random.default_rng(0).standard_normal((2, 7, 7)))
    assert np.array_equal(surrogate_predict(K, back), surrogate_predict(K, model))
    io.save_basis(tmp_path / "b.ckpt", model.basis, g)
    net, grid, _ = io.load_basis(tmp_path / "b.ckpt")
    assert grid.free_shape == (5, 5)
    assert np.array_equal(net.basis(K[:, 1:-1, 1:-1]), model.basis.basis(K[:, 1:-1, 1:-1]))


def test_pgm(tmp_path):
    f = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])
    io.emit_pgm(f, tmp_path / "f.pgm")
    raw = (tmp_path / "f.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    px = io.read_pgm(tmp_path / "f.pgm")
    assert px[0, 0] == 0 and px[-1, -1] == 255
    assert raw[-3:] == bytes(px[0])  # bottom row of the file is y = 0
    assert io.pgm_bytes(np.ones((2, 2)))[-4:] == bytes([128] * 4)
    with pytest.raises(ValueError):
        io.pgm_bytes(np.array([[np.nan]]))


def test_report_roundtrip(tmp_path):
    rows = [{"name": 'a,"b"', "x": 0.1, "n": 3}, {"name": "c", "x": 1 / 3, "n": 4}]
    io.emit_report(rows, tmp_path / "r.csv")
    back = io.read_report(tmp_path / "r.csv")
    assert back[0]["name"] == 'a,"b"'
    assert back[1]["x"] == 1 / 3
    io.emit_report([], tmp_path / "e.csv", ["N", "eps_test"])
    assert (tmp_path / "e.csv").read_text().strip() == "N,eps_test"
    with pytest.raises(ValueError):
        io.emit_report([], tmp_path / "e.csv")
    with pytest.raises(ValueError):
        io.emit_report([{"a": 1}, {"b": 2}], tmp_path / "e.csv")


def test_dataset_manifest_roundtrip(tmp_path):
    g = fem.build_grid(9, 9)
    path = io.gen_data(tmp_path / "d1", g, GeneratorSpec(r=0.15), "darcy", range(4))
    io.gen_data(tmp_path / "d2", g, GeneratorSpec(r=0.15), "darcy", range(4))
    man = json.loads(path.read_text())
    assert man["format_version"] == 1 and man["n_samples"] == 4
    for f in sorted((tmp_path / "d1").glob("*.romt")):
        assert f.read_bytes() == (tmp_path / "d2" / f.name).read_bytes()
    data = io.load_dataset(path)
    assert data.max_relative_residual() <= 1e-10
    assert data.seeds == [0, 1, 2, 3]
    noisy = io.load_dataset(path, label_noise=1e-3)
    assert 0 < np.abs(noisy.u - data.u).max() < 1e-2


def test_dataset_validation(tmp_path):
    g = fem.build_grid(7, 7)
    path = io.gen_data(tmp_path, g, GeneratorSpec(r=0.2), "darcy", range(2))
    man = json.loads(path.read_text())
    io.save_tensor(tmp_path / man["samples"][0]["u"], np.ones(3))
    with pytest.raises(FormatError):
        io.load_dataset(path)
    man["format_version"] = 99
    path.write_text(json.dumps(man))
    with pytest.raises(FormatError):
        io.load_dataset(path)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("ROM_THREADS", "3")
    assert io.worker_count() == 3
    monkeypatch.setenv("ROM_THREADS", "x")
    assert io.worker_count() == 1


def test_parallel_generation_matches_serial():
    g = fem.build_grid(7, 7)
    a, _ = io.generate_parallel(g, GeneratorSpec(r=0.2), "darcy", range(4), workers=2)
    b, _ = io.generate_parallel(g, GeneratorSpec(r=0.2), "darcy", range(4), workers=1)
    assert a.seeds == b.seeds and np.array_equal(a.u, b.u)


def test_config_layers(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 3\n[basis]\nepochs = 7\n')
    cfg = config.resolve_config(tmp_path / "c.toml", ["basis.N=4", "msfem.n_coarse=[2,4]", "output=x"])
    assert cfg["seed"] == 3 and cfg["basis"]["epochs"] == 7 and cfg["basis"]["N"] == 4
    assert cfg["msfem"]["n_coarse"] == [2, 4] and cfg["output"] == "x"
    assert cfg["basis"]["kernel"] == config.DEFAULTS["basis"]["kernel"]
    (tmp_path / "c.json").write_text('{"basis": {"epoch": 1}}')
    with pytest.raises(FormatError):
        config.resolve_config(tmp_path / "c.json")
    with pytest.raises(FormatError):
        config.resolve_config(None, ["basis.nope=1"])
    with pytest.raises(FormatError):
        config.resolve_config(None, ["basis"])
    p = config.write_resolved(cfg, tmp_path / "out")
    assert json.loads(p.read_text())["basis"]["N"] == 4
