"""In-memory datasets of ``(K, u_h, A_h, F_h)`` samples."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem, fields
from .errors import ConvergenceError

log = logging.getLogger(__name__)

EQUATIONS = ("darcy", "nonlinear_source", "plaplace")
GENERATORS = ("binomial", "grf", "channel")


@dataclass(eq=False)
class RomDataset:
    grid: fem.Grid2D
    K: np.ndarray  # (M, ny, nx) nodal permeability
    u: np.ndarray  # (M, n_free)
    A: list  # M CSR matrices on the free nodes
    F: np.ndarray  # (M, n_free)
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.u)

    def subset(self, idx) -> "RomDataset":
        idx = np.asarray(idx, dtype=int)
        seeds = [self.seeds[i] for i in idx] if self.seeds else []
        return RomDataset(self.grid, self.K[idx], self.u[idx], [self.A[i] for i in idx], self.F[idx], seeds)

    def free_images(self) -> np.ndarray:
        """Permeability on the free nodes as ``(M, ny-2, nx-2)`` images."""
        return self.K[:, 1:-1, 1:-1]

    def with_label_noise(self, std: float, seed) -> "RomDataset":
        """Copy with i.i.d. ``N(0, std^2)`` noise added to ``u`` (A, F untouched)."""
        rng = np.random.default_rng(seed)
        noisy = self.u + std * rng.standard_normal(self.u.shape)
        return RomDataset(self.grid, self.K, noisy, self.A, self.F, list(self.seeds))

    def max_relative_residual(self) -> float:
        return max(float(np.linalg.norm(A @ u - F) / np.linalg.norm(F))
                   for A, u, F in zip(self.A, self.u, self.F))


def dihedral_image(x: np.ndarray, t: int) -> np.ndarray:
    """Apply symmetry ``t`` of the square (0..7: ``t // 4`` flips, ``t % 4`` quarter turns) to the last two axes."""
    if t // 4:
        x = x[..., :, ::-1]
    return np.rot90(x, t % 4, axes=(-2, -1))


def dihedral_permutation(free_shape: tuple[int, int], t: int) -> np.ndarray:
    """Free-index permutation ``perm`` with ``u_t = u[perm]`` for symmetry ``t``."""
    H, W = free_shape
    if t % 2 and H != W:
        raise ValueError("quarter turns need a square free-node lattice")
    return np.ascontiguousarray(dihedral_image(np.arange(H * W).reshape(H, W), t)).ravel()


def dihedral_sample(data: RomDataset, i: int, t: int):
    """Sample ``i`` mapped by symmetry ``t``: ``(K_free_image, u, A, F)`` with ``A u = F`` preserved.

    The triple is relabelled consistently, so it is exact for any equation;
    it is a physical sample of the same problem whenever the problem is
    invariant under the symmetry (e.g. constant load on the unit square).
    """
    perm = dihedral_permutation(data.grid.free_shape, t)
    img = np.ascontiguousarray(dihedral_image(data.K[i, 1:-1, 1:-1], t))
    A = data.A[i][perm][:, perm]
    return img, data.u[i][perm], A, data.F[i][perm]


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "binomial"
    n: int = 5
    r: float = 0.05
    kappa0: float = 1.0
    kappa1: float = 1000.0
    l: float = 0.1
    m: float = 0.0
    Q: int = 20
    channels: int = 6
    width: float = 4.0
    image_size: int = 256


class FieldSampler:
    """Seed -> nodal permeability, for one generator spec on one grid."""

    def __init__(self, spec: GeneratorSpec, grid: fem.Grid2D):
        if spec.kind not in GENERATORS:
            raise ValueError(f"unknown generator {spec.kind!r}")
        self.spec, self.grid = spec, grid
        self.kle = fields.build_kle(grid, spec.l, spec.m, spec.Q) if spec.kind == "grf" else None

    def __call__(self, seed) -> np.ndarray:
        s = self.spec
        if s.kind == "binomial":
            cfg = fields.BinomialProcessCfg(s.n, s.r, s.kappa0, s.kappa1)
            return fields.sample_binomial_field(cfg, self.grid, seed)
        if s.kind == "grf":
            return fields.sample_grf(self.kle, seed)
        img = fields.synth_channel_image(s.image_size, s.channels, s.width, seed,
                                         s.kappa1, s.kappa0)
        rng = np.random.default_rng([int(seed), 1])
        i, j = rng.integers(0, s.image_size - self.grid.ny + 1, size=2)
        return img[i : i + self.grid.ny, j : j + self.grid.nx].copy()


def solve_sample(K: np.ndarray, grid: fem.Grid2D, equation: str, p: float = 3.0):
    """Solve one sample; returns ``(u_h, FemSystem)`` with ``A u_h = F`` self-consistent."""
    if equation == "darcy":
        sys = fem.assemble_darcy(K, grid)
        u, rep = fem.solve_linear(sys, tol=1e-12)
        sys.report = rep
        return u, sys
    if equation == "nonlinear_source":
        return fem.solve_nonlinear_source(K, grid)
    if equation == "plaplace":
        return fem.solve_plaplace(K, grid, p)
    raise ValueError(f"unknown equation {equation!r}")


def generate(grid: fem.Grid2D, spec: GeneratorSpec, equation: str, seeds, p: float = 3.0,
             sampler: FieldSampler | None = None):
    """Build a dataset for the given seeds; returns ``(dataset, failures)``."""
    sampler = sampler or FieldSampler(spec, grid)
    Ks, us, As, Fs, ok_seeds, failures = [], [], [], [], [], []
    for seed in seeds:
        K = sampler(seed)
        try:
            u, sys = solve_sample(K, grid, equation, p)
        except ConvergenceError as exc:
            log.warning("sample %s failed: %s", seed, exc)
            failures.append({"seed": int(seed), "error": str(exc)})
            continue
        Ks.append(K)
        us.append(u)
        As.append(sp.csr_matrix(sys.A))
        Fs.append(sys.F)
        ok_seeds.append(int(seed))
    ds = RomDataset(grid, np.array(Ks), np.array(us), As, np.array(Fs), ok_seeds)
    return ds, failures
