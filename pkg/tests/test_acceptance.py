"""End-to-end acceptance criteria 1-11.

Each test appends one ``criterion N: PASS|FAIL ...`` line, printed in the
terminal summary.  Criteria 5-7 and 11 train the desk-scale networks and take
roughly an hour together on one core; deselect them with ``-m "not slow"``.
"""
import time

import numpy as np
import pytest

from cnnrom import fem, galerkin as gal, io, msfem, pod, vae
from cnnrom.autodiff import ops
from cnnrom.basisnet import BasisNet, BasisNetCfg, _step_seeds, evaluate, loss_gradcheck, train_basis
from cnnrom.coefnet import CoefNetCfg, SurrogateModel, surrogate_predict, train_coef
from cnnrom.config import deterministic
from cnnrom.dataset import GeneratorSpec, generate, solve_sample
from cnnrom.fields import synth_channel_image

pytestmark = pytest.mark.acceptance

GRID = fem.build_grid(17, 17)
TRAIN_SEEDS = range(512)
TEST_SEEDS = range(10000, 10128)
BINOMIAL = GeneratorSpec(kind="binomial")
GRF = GeneratorSpec(kind="grf", l=0.1, m=0.0, Q=20)
BASIS_CFG = BasisNetCfg(free_shape=GRID.free_shape, epochs=100, lr0=3e-3, input_transform="log",
                        augment=True)
COEF_CFG = CoefNetCfg(free_shape=GRID.free_shape, N=BASIS_CFG.N, epochs=100, lr0=3e-3,
                      input_transform="log", augment=True)
LABEL_NOISE = 1e-3


def report(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    assert ok, line


# shared desk-scale runs ------------------------------------------------------------------


@pytest.fixture(scope="module")
def darcy_data():
    train, f1 = generate(GRID, BINOMIAL, "darcy", TRAIN_SEEDS)
    test, f2 = generate(GRID, BINOMIAL, "darcy", TEST_SEEDS)
    assert not f1 and not f2
    return train, test


@pytest.fixture(scope="module")
def nonlinear_data():
    train, f1 = generate(GRID, GRF, "nonlinear_source", TRAIN_SEEDS)
    test, f2 = generate(GRID, GRF, "nonlinear_source", TEST_SEEDS)
    assert not f1 and not f2
    return train, test


def run_basis(train, tmp_path, name):
    """Train the desk Basis-net under the determinism flag; returns (net, checkpoint bytes, seconds)."""
    t0 = time.perf_counter()
    with deterministic():
        net, _ = train_basis(train, BASIS_CFG, seed=0)
    secs = time.perf_counter() - t0
    path = tmp_path / f"{name}.ckpt"
    io.save_basis(path, net, train.grid)
    return net, path.read_bytes(), secs


def run_surrogate(train, tmp_path, name):
    t0 = time.perf_counter()
    basis, _, _ = run_basis(train, tmp_path, name + "_basis")
    with deterministic():
        coef, _ = train_coef(train, basis, COEF_CFG, seed=0)
    secs = time.perf_counter() - t0
    model = SurrogateModel(basis, coef, train.grid)
    path = tmp_path / f"{name}.ckpt"
    io.save_surrogate(path, model)
    return model, path.read_bytes(), secs


@pytest.fixture(scope="module")
def c5_run(darcy_data, tmp_path_factory):
    return run_basis(darcy_data[0], tmp_path_factory.mktemp("c5"), "basis")


@pytest.fixture(scope="module")
def c7_run(nonlinear_data, tmp_path_factory):
    return run_surrogate(nonlinear_data[0], tmp_path_factory.mktemp("c7"), "surrogate")


def pod_eps(train_u, test, N):
    return pod.pod_error_curve(train_u.T, list(zip(test.A, test.F)), test.u, [N])[0][1]


# 1-4: numerical building blocks ------------------------------------------------------------


def _manufactured_l2(n, kind):
    g = fem.build_grid(n, n, kind)
    X, Y = g.coords
    exact = np.sin(np.pi * X) * np.sin(np.pi * Y)
    u, _ = fem.solve_linear(fem.assemble_darcy(np.ones((n, n)), g, 2 * np.pi ** 2 * exact))
    e = (g.extend(u) - exact).ravel()
    return float(np.sqrt(e @ (fem.assemble_mass(g) @ e)))


def test_criterion_1_fem_convergence(acceptance_log):
    t0 = time.perf_counter()
    ratios = {k: _manufactured_l2(17, k) / _manufactured_l2(33, k) for k in ("quad", "tri")}
    secs = time.perf_counter() - t0
    ok = all(3.2 <= r <= 4.8 for r in ratios.values()) and secs < 10
    report(acceptance_log, 1, ok, f"L2 ratio h=1/16 vs 1/32: quad {ratios['quad']:.3f}, "
                                  f"tri {ratios['tri']:.3f} (target [3.2, 4.8]); {secs:.1f}s")


def test_criterion_2_galerkin_exactness(acceptance_log):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_exact = worst_orth = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 13))  # at most 100 free nodes
        g = fem.build_grid(n, n, ["quad", "tri"][int(rng.integers(2))])
        K = np.exp(rng.standard_normal((n, n)))
        sys = fem.assemble_darcy(K, g, rng.uniform(0.5, 2.0, (n, n)))
        u, _ = fem.solve_linear(sys)
        N = int(rng.integers(1, min(6, g.n_free)))
        P = np.column_stack([u, rng.standard_normal((g.n_free, N - 1))])
        P = P[:, rng.permutation(N)]
        u_hat, _ = gal.galerkin_activation(P, sys.A, sys.F)
        worst_exact = max(worst_exact, np.linalg.norm(u_hat - u) / np.linalg.norm(u))
        Q = rng.standard_normal((g.n_free, N))
        w_hat, _ = gal.galerkin_activation(Q, sys.A, sys.F)
        r = sys.A @ w_hat - sys.F
        # scale-free: the projected residual relative to |Q| |F|
        worst_orth = max(worst_orth, np.abs(Q.T @ r).max() / (np.linalg.norm(Q, 2) * np.linalg.norm(sys.F)))
    secs = time.perf_counter() - t0
    ok = worst_exact <= 1e-9 and worst_orth <= 1e-9 and secs < 5
    report(acceptance_log, 2, ok, f"50 systems: max rel error with u_h in span {worst_exact:.2e}, "
                                  f"max |P^T(A u - F)|/(|P||F|) {worst_orth:.2e} (target 1e-9); {secs:.1f}s")


def test_criterion_3_gradient_gate(acceptance_log):
    grid = fem.build_grid(5, 5)
    spec = GeneratorSpec(kind="grf", l=0.3, Q=20)
    cfg = BasisNetCfg(free_shape=grid.free_shape, channels=(2,), kernel=3, N=2, lambda_g=1e-2,
                      activation="softplus")
    t0 = time.perf_counter()
    errs = []
    for s in range(5):
        data, _ = generate(grid, spec, "darcy", range(1000 * s, 1000 * s + 3))
        errs.append(loss_gradcheck(BasisNet(cfg, seed=s), data, eps=1e-5))
    secs = time.perf_counter() - t0
    ok = max(errs) < 1e-5 and secs < 30
    report(acceptance_log, 3, ok, f"9 free nodes, N=2, one block: max relative FD error {max(errs):.2e} "
                                  f"over 5 seeds (target 1e-5); {secs:.1f}s")


def test_criterion_4_pod_optimality(acceptance_log):
    t0 = time.perf_counter()
    worst_tail = worst_orth = 0.0
    for seed in range(5):
        U = np.random.default_rng(seed).standard_normal((200, 50))
        for N in (1, 5, 10, 25, 49):
            b = pod.build_pod_basis(U, N)
            resid = np.sum((U - b.project(U)) ** 2)
            worst_tail = max(worst_tail, abs(resid - b.tail_energy()) / max(1.0, b.tail_energy()))
            worst_orth = max(worst_orth, np.abs(b.P.T @ b.P - np.eye(N)).max())
    secs = time.perf_counter() - t0
    ok = worst_tail <= 1e-10 and worst_orth <= 1e-10 and secs < 5
    report(acceptance_log, 4, ok, f"200x50 snapshots: projection error vs tail energy {worst_tail:.2e} "
                                  f"(relative), |P^T P - I| {worst_orth:.2e} (target 1e-10); {secs:.1f}s")


# 5-7: desk-scale training ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_basis_beats_pod(acceptance_log, darcy_data, c5_run):
    train, test = darcy_data
    net, _, secs = c5_run
    eps_b = evaluate(net, test)
    eps_0 = evaluate(BasisNet(BASIS_CFG, np.random.default_rng(_step_seeds(0)[0])), test)
    eps_p = pod_eps(train.u, test, BASIS_CFG.N)
    ok = eps_b < 0.10 and eps_b < eps_p and eps_0 >= 10 * eps_b and secs < 1800
    report(acceptance_log, 5, ok, f"N=5: Basis-net eps_test {eps_b:.4f} (target < 0.10), POD {eps_p:.4f}, "
                                  f"untrained {eps_0:.4f} ({eps_0 / eps_b:.0f}x); training {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_label_noise(acceptance_log, darcy_data, c5_run, tmp_path):
    train, test = darcy_data
    noisy = train.with_label_noise(LABEL_NOISE, seed=7)
    net, _, secs = run_basis(noisy, tmp_path, "noisy")
    eps_b = evaluate(net, test)
    eps_p = pod_eps(noisy.u, test, BASIS_CFG.N)
    clean_b = evaluate(c5_run[0], test)
    clean_p = pod_eps(train.u, test, BASIS_CFG.N)
    ok = eps_b < eps_p and secs < 1800
    report(acceptance_log, 6, ok,
           f"noise N(0, 1e-3^2): Basis-net {eps_b:.4f} (clean {clean_b:.4f}, {eps_b / clean_b - 1:+.0%}), "
           f"POD {eps_p:.4f} (clean {clean_p:.4f}, {eps_p / clean_p - 1:+.0%}); training {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_coef_pipeline(acceptance_log, nonlinear_data, c7_run, monkeypatch):
    train, test = nonlinear_data
    model, _, secs = c7_run

    def forbidden(*a, **k):
        raise AssertionError("surrogate_predict touched a fine-scale system")

    for mod, name in [(fem, "assemble_darcy"), (fem, "assemble_stiffness"), (fem, "solve_linear"),
                      (fem, "solve_nonlinear_source"), (gal, "galerkin_activation")]:
        monkeypatch.setattr(mod, name, forbidden)
    monkeypatch.setattr(fem.FemSystem, "__init__", forbidden)
    u_tilde = surrogate_predict(test.K, model)
    monkeypatch.undo()
    eps = fem.relative_test_mean_error(u_tilde, test.u)
    ok = eps < 0.15 and secs < 2700
    report(acceptance_log, 7, ok, f"nonlinear source, surrogate eps_test {eps:.4f} (target < 0.15) with no "
                                  f"stiffness/load/solve calls; training {secs / 60:.1f} min")


# 8-10: solvers and applications -------------------------------------------------------------------


def test_criterion_8_plaplace(acceptance_log):
    grid = fem.build_grid(17, 17, "tri")
    t0 = time.perf_counter()
    data, failures = generate(grid, GRF, "plaplace", range(64), p=3.0)
    worst = data.max_relative_residual()
    diff = 0.0
    for K in data.K:
        # started from zero so the p = 2 result comes from the energy Newton iteration
        u2, _ = fem.solve_plaplace(K, grid, p=2.0, u0=np.zeros(grid.n_free))
        u_lin, _ = solve_sample(K, grid, "darcy")
        diff = max(diff, np.abs(u2 - u_lin).max())
    secs = time.perf_counter() - t0
    ok = not failures and len(data) == 64 and worst <= 1e-8 and diff <= 1e-10 and secs < 300
    report(acceptance_log, 8, ok, f"64 samples p=3: max |A u - F|/|F| {worst:.2e} (target 1e-8); "
                                  f"p=2 vs Darcy max |du| {diff:.2e} (target 1e-10); {secs:.1f}s")


def test_criterion_9_msfem(acceptance_log):
    t0 = time.perf_counter()
    mesh8 = msfem.CoarseMesh(8, 8)
    const = msfem.build_ms_basis(np.ones((65, 65)), mesh8, ring=1)
    hat_err = abs(const.B - msfem.bilinear_prolongation(mesh8)).max()
    K = synth_channel_image(65, 4, 3, seed=0)
    sources = {"exp": msfem.make_source("exp-sum", 1.0, 1.0), "sin": msfem.make_source("sin-sum", 1.0, 1.0)}
    errs, resolves = {}, 0
    for nc in (8, 16):
        basis = msfem.build_ms_basis(K, msfem.CoarseMesh(nc, 64 // nc), ring=1)
        for name, f in sources.items():
            before = msfem.local_solve_count()
            errs[nc, name] = msfem.msfem_solve(K, f, basis).rel_error
            resolves += msfem.local_solve_count() - before
    secs = time.perf_counter() - t0
    decreasing = all(errs[16, s] < errs[8, s] for s in sources)
    ok = hat_err <= 1e-8 and decreasing and resolves == 0 and secs < 600
    report(acceptance_log, 9, ok,
           f"hats {hat_err:.1e}; rel error 8->16: exp {errs[8, 'exp']:.4f}->{errs[16, 'exp']:.4f}, "
           f"sin {errs[8, 'sin']:.4f}->{errs[16, 'sin']:.4f}; local re-solves {resolves}; {secs:.1f}s")


def test_criterion_10_vae(acceptance_log):
    rng = np.random.default_rng(0)
    Q, n = 4, 16
    G = rng.standard_normal((n, Q)) / 2
    z0 = rng.standard_normal(Q)
    noise = rng.standard_normal(n)
    t0 = time.perf_counter()
    stds, worst_z, kl_err = [], 0.0, 0.0
    for sigma in (0.05, 0.02, 0.01, 0.005):
        y = G @ z0 + sigma * noise
        mean, cov = vae.linear_gaussian_posterior(G, y, sigma)
        net = vae.RecognitionNet(vae.RecognitionCfg(n_obs=n, Q=Q, hidden=(32, 32)), seed=1)
        cfg = vae.VaeTrainCfg(steps=3000, batch_size=1, lr0=3e-3, lr_floor=1e-4, elbo=vae.ElboCfg(sigma, 8))
        vae.train_vae(y[None], vae.LinearForward(G), net, cfg, seed=0)
        q = vae.recognition_forward(y, net)
        worst_z = max(worst_z, np.max(np.abs(q.mu - mean) / np.sqrt(np.diag(cov))))
        stds.append(float(q.std.mean()))
        kl = float(ops.gaussian_kl(q.mu[None], q.log_var[None]).value[0])
        kl_err = max(kl_err, abs(vae.gaussian_kl_mc(q, 100_000, seed=1) - kl) / kl)
    secs = time.perf_counter() - t0
    monotone = all(b < a for a, b in zip(stds, stds[1:]))
    ok = worst_z <= 3 and kl_err <= 0.02 and monotone and secs < 900
    report(acceptance_log, 10, ok,
           f"max |mu - mu*|/std* {worst_z:.2f} (target 3); KL vs MC {kl_err:.2%} (target 2%); "
           f"mean posterior std {' > '.join(f'{s:.4f}' for s in stds)}; {secs:.1f}s")


# 11: reproducibility -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_11_bitwise_reproducible(acceptance_log, darcy_data, nonlinear_data, c5_run, c7_run,
                                           tmp_path):
    _, basis_again, _ = run_basis(darcy_data[0], tmp_path, "basis_again")
    _, surrogate_again, _ = run_surrogate(nonlinear_data[0], tmp_path, "surrogate_again")
    same5 = basis_again == c5_run[1]
    same7 = surrogate_again == c7_run[1]
    report(acceptance_log, 11, same5 and same7,
           f"rerun checkpoints identical: criterion 5 {same5} ({len(basis_again)} bytes), "
           f"criterion 7 {same7} ({len(surrogate_again)} bytes)")
