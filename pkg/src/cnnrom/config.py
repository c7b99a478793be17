"""Run configuration: nested defaults, JSON/TOML files, ``--set`` overrides, strict keys."""
from __future__ import annotations

import contextlib
import copy
import json
import sys
from pathlib import Path

from .errors import FormatError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict = {
    "seed": 0,
    "output": "runs/default",
    "deterministic": True,
    "log_level": "INFO",
    "grid": {"nx": 17, "ny": 17, "kind": "quad"},
    "equation": "darcy",
    "p": 3.0,
    "generator": {"kind": "binomial", "n": 5, "r": 0.05, "kappa0": 1.0, "kappa1": 1000.0,
                  "l": 0.1, "m": 0.0, "Q": 20, "channels": 6, "width": 4.0, "image_size": 256},
    "data": {"n_train": 512, "n_val": 64, "n_test": 128, "train_seed0": 0, "val_seed0": 20000,
             "test_seed0": 10000, "label_noise": 0.0, "noise_seed": 7, "manifest_dir": ""},
    "basis": {"channels": [8, 8, 16, 16, 32, 32], "kernel": 7, "N": 5, "lambda_g": 1e-6,
              "activation": "relu", "input_transform": "log", "batch_size": 32, "epochs": 100,
              "lr0": 3e-3, "lr_floor": 0.0, "symmetrize": False, "max_skip_rate": 0.5, "augment": True},
    "coef": {"channels": [8, 8, 16, 16, 32, 32], "strides": [1, 2, 1, 2, 1, 2], "kernel": 7,
             "fc": [64, 64], "activation": "relu", "input_transform": "log", "batch_size": 32,
             "epochs": 100, "lr0": 3e-3, "lr_floor": 0.0, "augment": True, "checkpoint": ""},
    "pod": {"Ns": [1, 2, 3, 5, 10, 20]},
    "eval": {"checkpoint": ""},
    "gen_field": {"count": 1},
    "msfem": {"fine_cells": 64, "n_coarse": [8, 16], "ring": 1, "sources": ["exp-sum", "sin-sum"],
              "source_a": 1.0, "source_b": 1.0, "channels": 4, "width": 3.0, "field_seed": 0,
              "kappa_channel": 1000.0, "kappa_matrix": 1.0, "predictor": "direct", "checkpoint": ""},
    "vae": {"mode": "toy", "checkpoint": "", "s": 15, "Q": 4, "l": 0.2, "sigma_obs": 0.01,
            "mc_samples": 8, "steps": 2000, "batch_size": 32, "lr0": 1e-3, "lr_floor": 1e-4,
            "hidden": [256, 256], "activation": "relu", "n_obs_train": 256, "M": 1024, "toy_n_obs": 16},
    "gradcheck": {"nodes": 5, "N": 2, "channels": [2], "kernel": 3, "lambda_g": 1e-2,
                  "activation": "softplus", "eps": 1e-5, "seeds": 5, "batch": 3, "generator": "grf",
                  "l": 0.3},
}


def _check_keys(cfg: dict, ref: dict, path: str = "") -> None:
    for k, v in cfg.items():
        where = f"{path}{k}"
        if k not in ref:
            raise FormatError(f"unknown config key {where!r}")
        if isinstance(ref[k], dict):
            if not isinstance(v, dict):
                raise FormatError(f"config key {where!r} must be a table")
            _check_keys(v, ref[k], where + ".")


def _merge(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def read_config_file(path) -> dict:
    p = Path(path)
    try:
        if p.suffix == ".toml":
            return tomllib.loads(p.read_text())
        return json.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read config {p}: {exc}") from exc


def _literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as JSON when possible) in place."""
    if "=" not in assignment:
        raise FormatError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node, ref = cfg, DEFAULTS
    for p in parts[:-1]:
        if p not in ref or not isinstance(ref[p], dict):
            raise FormatError(f"unknown config key {key!r}")
        node, ref = node[p], ref[p]
    if parts[-1] not in ref or isinstance(ref[parts[-1]], dict):
        raise FormatError(f"unknown config key {key!r}")
    node[parts[-1]] = _literal(text.strip())


def resolve_config(path=None, overrides=()) -> dict:
    """Defaults, then the file at ``path``, then each ``key=value`` override."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        user = read_config_file(path)
        _check_keys(user, DEFAULTS)
        cfg = _merge(cfg, user)
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def write_resolved(cfg: dict, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "config.resolved.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return path


def deterministic(enabled: bool = True):
    """Context pinning BLAS/OpenMP pools to one thread so reductions run in a fixed order."""
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(1)
