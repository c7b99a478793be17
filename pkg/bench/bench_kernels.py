"""Time the compiled kernels against the numpy fallback.

    python bench/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from cnnrom import _pykernels

try:
    from cnnrom import _ckernels
except ImportError:
    _ckernels = None


def cases():
    rng = np.random.default_rng(0)
    # one 7x7 same-padded conv layer of the desk basis net on a batch of 32
    B, C, H, k = 32, 8, 15, 7
    xp = rng.standard_normal((B, C, H + k - 1, H + k - 1))
    cols = rng.standard_normal((B * H * H, C * k * k))
    # stiffness assembly on a 65x65 quad grid: 16 entries per element
    n_free = 63 * 63
    idx = rng.integers(0, n_free * 9, size=64 * 64 * 16).astype(np.int64)
    w = rng.standard_normal(idx.size)
    return {
        "im2col": lambda m: m.im2col(xp, k, k, 1, H, H),
        "col2im": lambda m: m.col2im(cols, B, C, H + k - 1, H + k - 1, k, k, 1, H, H),
        "scatter_add": lambda m: m.scatter_add(idx, w, n_free * 9),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"numpy": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    print(f"{'kernel':<12}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases().items():
        times = {}
        for b, mod in backends.items():
            fn(mod)  # warm up
            times[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{name:<12}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in times:
            row += f"{times['numpy'] / times['cython']:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
