"""Command-line entry point: ``cnnrom <subcommand> [--config PATH] [--set key=value ...]``.

Exit codes: 0 success, 1 failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataset as dsmod
from . import fem, fields, io, msfem, pod, vae
from .basisnet import BasisNet, BasisNetCfg, evaluate, loss_gradcheck, train_basis
from .coefnet import CoefNetCfg, SurrogateModel, surrogate_predict, train_coef
from .errors import CnnRomError, FormatError

log = logging.getLogger("cnnrom")

COMMANDS = ("gen-field", "gen-data", "train-basis", "train-coef", "pod", "eval", "msfem", "invert",
            "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cnnrom", description="CNN reduced-order models for multiscale PDEs.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON or TOML run configuration")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. basis.epochs=10")
        s.add_argument("--output", help="output directory (overrides config 'output')")
        if name == "pod":
            s.add_argument("--Ns", help="comma-separated basis sizes, e.g. 1,5,10")
    return p


# helpers ----------------------------------------------------------------------------------


def _grid(cfg) -> fem.Grid2D:
    g = cfg["grid"]
    return fem.Grid2D(int(g["nx"]), int(g["ny"]), g["kind"])


def _spec(cfg) -> dsmod.GeneratorSpec:
    return dsmod.GeneratorSpec(**cfg["generator"])


def _basis_cfg(cfg, grid) -> BasisNetCfg:
    return BasisNetCfg(free_shape=grid.free_shape, **cfg["basis"])


def _coef_cfg(cfg, grid, N) -> CoefNetCfg:
    c = {k: v for k, v in cfg["coef"].items() if k != "checkpoint"}
    return CoefNetCfg(free_shape=grid.free_shape, N=N, **c)


def _splits(cfg):
    d = cfg["data"]
    return {"train": range(d["train_seed0"], d["train_seed0"] + d["n_train"]),
            "val": range(d["val_seed0"], d["val_seed0"] + d["n_val"]),
            "test": range(d["test_seed0"], d["test_seed0"] + d["n_test"])}


def load_splits(cfg) -> dict:
    """Train/val/test datasets from stored manifests (validated first) or generated in memory."""
    d = cfg["data"]
    out = {}
    if d["manifest_dir"]:
        root = Path(d["manifest_dir"])
        for name in ("train", "val", "test"):
            if (root / name / "manifest.json").exists():
                out[name] = io.load_dataset(root / name)
        if "train" not in out or "test" not in out:
            raise FormatError(f"{root} needs train/ and test/ manifests")
    else:
        grid, spec = _grid(cfg), _spec(cfg)
        sampler = dsmod.FieldSampler(spec, grid)
        for name, seeds in _splits(cfg).items():
            if len(seeds):
                out[name], fails = dsmod.generate(grid, spec, cfg["equation"], seeds, cfg["p"], sampler)
                if fails:
                    log.warning("%s split: %d solver failures", name, len(fails))
    if d["label_noise"] > 0:
        out["train"] = out["train"].with_label_noise(d["label_noise"], d["noise_seed"])
    return out


# commands ----------------------------------------------------------------------------------


def cmd_gen_field(cfg, out: Path, args) -> int:
    grid, spec = _grid(cfg), _spec(cfg)
    sampler = dsmod.FieldSampler(spec, grid)
    for i in range(cfg["gen_field"]["count"]):
        K = sampler(cfg["seed"] + i)
        io.save_tensor(out / f"field_{i:03d}.romt", K)
        io.emit_pgm(np.log(K), out / f"field_{i:03d}.pgm")
    print(f"wrote {cfg['gen_field']['count']} field(s) to {out}")
    return 0


def cmd_gen_data(cfg, out: Path, args) -> int:
    grid, spec = _grid(cfg), _spec(cfg)
    for name, seeds in _splits(cfg).items():
        if not len(seeds):
            continue
        path = io.gen_data(out / "data" / name, grid, spec, cfg["equation"], seeds, cfg["p"])
        print(f"{name}: {path}")
    return 0


def cmd_train_basis(cfg, out: Path, args) -> int:
    data = load_splits(cfg)
    grid = data["train"].grid
    bcfg = _basis_cfg(cfg, grid)
    t0 = time.perf_counter()
    net, hist = train_basis(data["train"], bcfg, cfg["seed"], val=data.get("val"))
    eps = evaluate(net, data["test"])
    N = bcfg.N
    pod_eps = pod.pod_error_curve(data["train"].u.T, list(zip(data["test"].A, data["test"].F)),
                                  data["test"].u, [N])[0][1]
    io.save_basis(out / "basis.ckpt", net, grid)
    io.emit_report(hist.as_rows(), out / "basis_history.csv", _history_columns(hist))
    io.emit_report([{"N": N, "eps_test_basis": eps, "eps_test_pod": pod_eps,
                     "seconds": time.perf_counter() - t0}], out / "basis_report.csv")
    print(f"eps_test basis={eps:.6g} pod={pod_eps:.6g} (N={N})")
    return 0


def _history_columns(hist):
    cols = []
    for r in hist.as_rows():
        cols += [k for k in r if k not in cols]
    for r in hist.epochs:
        for c in cols:
            r.setdefault(c, float("nan"))
    return cols


def _load_basis_ckpt(cfg, out: Path):
    path = Path(cfg["coef"]["checkpoint"] or out / "basis.ckpt")
    if not path.exists():
        raise FormatError(f"basis checkpoint {path} not found; run train-basis first")
    net, grid, _ = io.load_basis(path)
    return net, grid


def cmd_train_coef(cfg, out: Path, args) -> int:
    basis, grid = _load_basis_ckpt(cfg, out)
    data = load_splits(cfg)
    if data["train"].grid.free_shape != grid.free_shape:
        raise FormatError("basis checkpoint and data use different grids")
    ccfg = _coef_cfg(cfg, grid, basis.cfg.N)
    net, hist = train_coef(data["train"], basis, ccfg, cfg["seed"], val=data.get("val"))
    model = SurrogateModel(basis, net, grid)
    eps = fem.relative_test_mean_error(surrogate_predict(data["test"].K, model), data["test"].u)
    eps_g = evaluate(basis, data["test"])
    io.save_surrogate(out / "surrogate.ckpt", model)
    io.emit_report(hist.as_rows(), out / "coef_history.csv", _history_columns(hist))
    io.emit_report([{"N": basis.cfg.N, "eps_test_surrogate": eps, "eps_test_galerkin": eps_g}],
                   out / "coef_report.csv")
    print(f"eps_test surrogate={eps:.6g} galerkin={eps_g:.6g}")
    return 0


def cmd_pod(cfg, out: Path, args) -> int:
    Ns = [int(n) for n in args.Ns.split(",")] if args.Ns else [int(n) for n in cfg["pod"]["Ns"]]
    cfg["pod"]["Ns"] = Ns
    data = load_splits(cfg)
    te = data["test"]
    curve = pod.pod_error_curve(data["train"].u.T, list(zip(te.A, te.F)), te.u, Ns)
    rows = [{"N": n, "eps_test": e} for n, e in curve]
    io.emit_report(rows, out / "pod.csv", ["N", "eps_test"])
    print("N,eps_test")
    for r in rows:
        print(f"{r['N']},{r['eps_test']:.17g}")
    return 0


def cmd_eval(cfg, out: Path, args) -> int:
    path = Path(cfg["eval"]["checkpoint"] or out / "surrogate.ckpt")
    if not path.exists():
        raise FormatError(f"checkpoint {path} not found")
    _, meta = io.load_checkpoint(path)
    data = load_splits(cfg)
    te = data["test"]
    if meta.get("kind") == "surrogate":
        model, _ = io.load_surrogate(path)
        row = {"eps_test_surrogate": fem.relative_test_mean_error(surrogate_predict(te.K, model), te.u),
               "eps_test_galerkin": evaluate(model.basis, te)}
    else:
        net, _, _ = io.load_basis(path)
        row = {"eps_test_galerkin": evaluate(net, te)}
    io.emit_report([row], out / "eval_report.csv")
    print(", ".join(f"{k}={v:.6g}" for k, v in row.items()))
    return 0


def cmd_msfem(cfg, out: Path, args) -> int:
    m = cfg["msfem"]
    nf = int(m["fine_cells"]) + 1
    K = fields.synth_channel_image(nf, m["channels"], m["width"], m["field_seed"], m["kappa_channel"],
                                   m["kappa_matrix"])
    io.emit_pgm(np.log(K), out / "msfem_field.pgm")
    predictor = None
    if m["predictor"] == "net":
        net, _, _ = io.load_basis(m["checkpoint"])
        predictor = msfem.galerkin_net_predictor(net)
    elif m["predictor"] != "direct":
        raise FormatError(f"unknown predictor {m['predictor']!r}")
    rows = []
    for nc in m["n_coarse"]:
        nc = int(nc)
        if (nf - 1) % nc:
            raise FormatError(f"{nc} coarse elements do not nest in {nf - 1} fine cells")
        mesh = msfem.CoarseMesh(nc, (nf - 1) // nc)
        basis = msfem.build_ms_basis(K, mesh, m["ring"], predictor)
        for src in m["sources"]:
            before = msfem.local_solve_count()
            res = msfem.msfem_solve(K, msfem.make_source(src, m["source_a"], m["source_b"]), basis)
            rows.append({"n_coarse": nc, "n_basis": mesh.n_nodes, "source": src, "rel_error": res.rel_error,
                         "local_solves_basis": basis.n_local_solves,
                         "local_solves_during_solve": msfem.local_solve_count() - before})
            grid = mesh.fine_grid
            io.emit_pgm(grid.extend(res.u_ms), out / f"msfem_u_{nc}_{src}.pgm")
    io.emit_report(rows, out / "msfem.csv")
    for r in rows:
        print(f"n_coarse={r['n_coarse']} N={r['n_basis']} source={r['source']} rel_error={r['rel_error']:.6g}")
    return 0


def cmd_invert(cfg, out: Path, args) -> int:
    v = cfg["vae"]
    rng = np.random.default_rng(cfg["seed"])
    ecfg = vae.ElboCfg(v["sigma_obs"], v["mc_samples"])
    tcfg = vae.VaeTrainCfg(v["steps"], v["batch_size"], v["lr0"], v["lr_floor"], ecfg)
    if v["mode"] == "toy":
        Q, n = int(v["Q"]), int(v["toy_n_obs"])
        G = rng.standard_normal((n, Q)) / 2
        z_true = rng.standard_normal(Q)
        y = G @ z_true + v["sigma_obs"] * rng.standard_normal(n)
        net = vae.RecognitionNet(vae.RecognitionCfg(n, Q, v["hidden"], v["activation"]), cfg["seed"])
        hist = vae.train_vae(y[None], vae.LinearForward(G), net, tcfg, cfg["seed"])
        q = vae.recognition_forward(y, net)
        mean, cov = vae.linear_gaussian_posterior(G, y, v["sigma_obs"])
        rows = [{"j": j, "z_true": z_true[j], "mu": q.mu[j], "std": q.std[j], "mu_exact": mean[j],
                 "std_exact": np.sqrt(cov[j, j])} for j in range(Q)]
        io.emit_report(rows, out / "posterior.csv")
        print(f"final ELBO {hist[-1]:.6g}; log evidence {vae.linear_gaussian_evidence(G, y, v['sigma_obs']):.6g}")
        return 0
    if v["mode"] != "surrogate":
        raise FormatError(f"unknown vae.mode {v['mode']!r}")
    model, _ = io.load_surrogate(v["checkpoint"])
    grid = model.grid
    kle = fields.build_kle(grid, v["l"], cfg["generator"]["m"], int(v["Q"]))
    layout = vae.sensor_layout(grid, int(v["s"]))
    fwd = vae.SurrogateForward(model, kle, layout)
    Z = rng.standard_normal((int(v["n_obs_train"]) + 1, kle.Q))
    Ks = np.exp(kle.m + Z @ kle.scaled_modes.T).reshape(-1, grid.ny, grid.nx)
    U = np.concatenate([surrogate_predict(Ks[s : s + 64], model) for s in range(0, len(Ks), 64)])
    Ys = vae.observe(U, layout, v["sigma_obs"], rng)
    net = vae.RecognitionNet(vae.RecognitionCfg(layout.n_obs, kle.Q, v["hidden"], v["activation"]), cfg["seed"])
    hist = vae.train_vae(Ys, fwd, net, tcfg, cfg["seed"])
    q = vae.recognition_forward(Ys[0], net)
    mean, var = vae.posterior_field_stats(kle, q, int(v["M"]), cfg["seed"])
    io.emit_pgm(np.log(Ks[0]), out / "invert_true_logK.pgm")
    io.emit_pgm(np.log(mean), out / "invert_mean_logK.pgm")
    io.emit_pgm(var, out / "invert_var_K.pgm")
    io.emit_report([{"j": j, "z_true": Z[0, j], "mu": q.mu[j], "std": q.std[j]} for j in range(kle.Q)],
                   out / "posterior.csv")
    print(f"final ELBO {hist[-1]:.6g}; mean posterior std {q.std.mean():.4g}")
    return 0


def cmd_gradcheck(cfg, out: Path, args) -> int:
    g = cfg["gradcheck"]
    grid = fem.Grid2D(int(g["nodes"]), int(g["nodes"]), cfg["grid"]["kind"])
    # smooth random fields keep the reduced matrices well conditioned on tiny grids
    spec = dsmod.GeneratorSpec(**{**cfg["generator"], "kind": g["generator"], "l": float(g["l"])})
    worst = 0.0
    for s in range(int(g["seeds"])):
        data, _ = dsmod.generate(grid, spec, "darcy", range(1000 * s, 1000 * s + int(g["batch"])))
        bcfg = BasisNetCfg(free_shape=grid.free_shape, channels=tuple(g["channels"]), kernel=int(g["kernel"]),
                           N=int(g["N"]), lambda_g=float(g["lambda_g"]), activation=g["activation"])
        err = loss_gradcheck(BasisNet(bcfg, seed=s), data, eps=float(g["eps"]))
        print(f"seed {s}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative FD error {worst:.3e}")
    return 0 if worst < 1e-5 else 1


HANDLERS = {"gen-field": cmd_gen_field, "gen-data": cmd_gen_data, "train-basis": cmd_train_basis,
            "train-coef": cmd_train_coef, "pod": cmd_pod, "eval": cmd_eval, "msfem": cmd_msfem,
            "invert": cmd_invert, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cnnrom: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = cfgmod.resolve_config(args.config, args.set)
    except FormatError as exc:
        print(f"cnnrom: error: {exc}", file=sys.stderr)
        return 2
    if args.output:
        cfg["output"] = args.output
    logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(cfg["output"])
    cfgmod.write_resolved(cfg, out)
    try:
        with cfgmod.deterministic(bool(cfg["deterministic"])):
            code = HANDLERS[args.command](cfg, out, args)
    except (CnnRomError, ValueError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1
    cfgmod.write_resolved(cfg, out)
    return code


if __name__ == "__main__":
    sys.exit(main())
