"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np


def _flatten(params):
    if isinstance(params, dict):
        keys = list(params)
        return keys, [np.asarray(params[k], dtype=float) for k in keys]
    return None, [np.asarray(params, dtype=float)]


def grad_check(fun, params, eps: float = 1e-5, mode: str = "coordinate", n_dirs: int = 8,
               seed=0, floor: float = 1e-3) -> float:
    """Max relative error between ``fun``'s analytic gradient and central differences.

    ``fun(params) -> (value, grad)`` where ``params`` and ``grad`` are an array
    or a dict of arrays with matching structure.  In ``"coordinate"`` mode every
    entry is perturbed and the error of entry ``i`` is
    ``|a_i - n_i| / max(|a_i|, |n_i|, floor * max_j |n_j|)`` so that entries
    many orders below the gradient scale do not measure pure round-off.
    ``"directions"`` compares directional derivatives along random unit
    vectors instead.
    """
    keys, arrays = _flatten(params)
    _, g = fun(params)
    _, grads = _flatten(g) if keys is None else (keys, [np.asarray(g[k], float) for k in keys])

    def evaluate(new_arrays):
        p = new_arrays[0] if keys is None else dict(zip(keys, new_arrays))
        return float(fun(p)[0])

    if mode == "coordinate":
        num = [np.zeros_like(a) for a in arrays]
        for t, a in enumerate(arrays):
            for idx in np.ndindex(a.shape):
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[t][idx] += eps
                minus[t][idx] -= eps
                num[t][idx] = (evaluate(plus) - evaluate(minus)) / (2 * eps)
        a_flat = np.concatenate([x.ravel() for x in grads])
        n_flat = np.concatenate([x.ravel() for x in num])
        scale = max(np.max(np.abs(n_flat)), np.max(np.abs(a_flat)), 1e-300)
        denom = np.maximum(np.maximum(np.abs(a_flat), np.abs(n_flat)), floor * scale)
        return float(np.max(np.abs(a_flat - n_flat) / denom))
    if mode == "directions":
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_dirs):
            d = [rng.standard_normal(a.shape) for a in arrays]
            nrm = np.sqrt(sum(float(np.sum(x * x)) for x in d))
            d = [x / nrm for x in d]
            ana = sum(float(np.sum(gr * x)) for gr, x in zip(grads, d))
            fp = evaluate([a + eps * x for a, x in zip(arrays, d)])
            fm = evaluate([a - eps * x for a, x in zip(arrays, d)])
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(ana - fd) / max(abs(ana), abs(fd), 1e-300))
        return worst
    raise ValueError(f"unknown mode {mode!r}")
