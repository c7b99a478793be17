"""Random permeability fields and the geometric transforms used for augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .fem import Grid2D
from .errors import ShapeError


@dataclass(frozen=True)
class BinomialProcessCfg:
    n: int = 5
    r: float = 0.05
    kappa0: float = 1.0
    kappa1: float = 1000.0

    def __post_init__(self):
        if self.n < 0 or self.r <= 0 or self.kappa0 <= 0 or self.kappa1 <= 0:
            raise ValueError(f"invalid binomial process config {self}")


def binomial_field_from_centers(centers, cfg: BinomialProcessCfg, grid: Grid2D) -> np.ndarray:
    X, Y = grid.coords
    K = np.full((grid.ny, grid.nx), cfg.kappa0, dtype=float)
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(centers):
        pts = np.column_stack([X.ravel(), Y.ravel()])
        inside = (cdist(pts, centers) <= cfg.r).any(axis=1).reshape(K.shape)
        K[inside] = cfg.kappa1
    return K


def sample_binomial_field(cfg: BinomialProcessCfg, grid: Grid2D, seed) -> np.ndarray:
    """Two-valued field: ``kappa1`` within distance ``r`` of any of ``n`` uniform centers."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(cfg.n, 2))
    return binomial_field_from_centers(centers, cfg, grid)


@dataclass(eq=False)
class KleModel:
    """Truncated Karhunen-Loeve expansion of ``exp(-|x-y|/l)`` on the grid nodes.

    ``modes`` holds eigenvectors of the nodal covariance matrix (Euclidean
    normalization), so ``sum_i lambdas[i] * modes[:, i]**2`` is the truncated
    pointwise variance.
    """

    grid: Grid2D
    l: float
    m: float
    lambdas: np.ndarray
    modes: np.ndarray

    @property
    def Q(self) -> int:
        return len(self.lambdas)

    @property
    def scaled_modes(self) -> np.ndarray:
        """``modes * sqrt(lambdas)``, shape ``(n_nodes, Q)``."""
        return self.modes * np.sqrt(self.lambdas)

    def log_field(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.Q,):
            raise ShapeError(f"expected {self.Q} KLE coefficients, got shape {z.shape}")
        return (self.m + self.scaled_modes @ z).reshape(self.grid.ny, self.grid.nx)

    def field(self, z) -> np.ndarray:
        return np.exp(self.log_field(z))

    def covariance(self) -> np.ndarray:
        """Truncated covariance ``sum lambda_i g_i g_i^T``."""
        S = self.scaled_modes
        return S @ S.T


def covariance_matrix(grid: Grid2D, l: float) -> np.ndarray:
    X, Y = grid.coords
    pts = np.column_stack([X.ravel(), Y.ravel()])
    if np.isinf(l):
        return np.ones((len(pts), len(pts)))
    return np.exp(-cdist(pts, pts) / l)


def build_kle(grid: Grid2D, l: float, m: float = 0.0, Q: int = 20) -> KleModel:
    n = grid.n_nodes
    if not 1 <= Q <= n:
        raise ValueError(f"truncation order {Q} outside [1, {n}]")
    C = covariance_matrix(grid, l)
    w, V = sla.eigh(C, subset_by_index=[n - Q, n - 1])
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    V = V[:, order]
    # fix the sign so each mode has a positive largest-magnitude entry
    signs = np.sign(V[np.abs(V).argmax(axis=0), np.arange(Q)])
    V = V * np.where(signs == 0, 1.0, signs)
    return KleModel(grid, float(l), float(m), w, V)


def sample_grf(kle: KleModel, seed=None, z=None) -> np.ndarray:
    """Log-Gaussian field ``exp(m + sum sqrt(lambda_i) z_i g_i)``; ``z`` drawn from ``seed`` if absent."""
    if z is None:
        z = np.random.default_rng(seed).standard_normal(kle.Q)
    return kle.field(z)


# channelized media ------------------------------------------------------------


@dataclass(frozen=True)
class ChannelPatchCfg:
    patch: int = 64
    stride: int = 16
    flip: bool = True
    rotations: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.patch < 1 or not 0 <= self.rotations <= 3:
            raise ValueError(f"invalid patch config {self}")


def rotate90(K: np.ndarray, times: int = 1) -> np.ndarray:
    """Rotate a square field clockwise by ``90 * times`` degrees."""
    K = np.asarray(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"rotation needs a square field, got {K.shape}")
    return np.rot90(K, -(times % 4)).copy()


def flip_horizontal(K: np.ndarray) -> np.ndarray:
    return np.asarray(K)[:, ::-1].copy()


def extract_patches(image: np.ndarray, cfg: ChannelPatchCfg) -> list[np.ndarray]:
    """Sliding-window patches, row-major, followed by flipped then rotated copies."""
    image = np.asarray(image, dtype=float)
    H, W = image.shape
    p, s = cfg.patch, cfg.stride
    if p > H or p > W:
        raise ShapeError(f"patch {p} larger than image {image.shape}")
    windows = [
        image[i : i + p, j : j + p].copy()
        for i in range(0, H - p + 1, s)
        for j in range(0, W - p + 1, s)
    ]
    out = list(windows)
    if cfg.flip:
        out += [flip_horizontal(w) for w in windows]
    for t in range(1, cfg.rotations + 1):
        out += [rotate90(w, t) for w in windows]
    return out


def synth_channel_image(size: int, n_channels: int, width: float, seed,
                        kappa_channel: float = 1000.0, kappa_matrix: float = 1.0) -> np.ndarray:
    """Binary raster of sinuous channels on a uniform background.

    Each channel is a band of the given pixel width around a sine-perturbed
    line running horizontally or vertically across the image.
    """
    rng = np.random.default_rng(seed)
    img = np.full((size, size), kappa_matrix, dtype=float)
    t = np.arange(size, dtype=float)
    rows = t[:, None]
    for _ in range(n_channels):
        offset = rng.uniform(0.1, 0.9) * size
        amp = rng.uniform(0.03, 0.12) * size
        period = rng.uniform(0.5, 1.5) * size
        phase = rng.uniform(0, 2 * np.pi)
        center = offset + amp * np.sin(2 * np.pi * t / period + phase)  # one value per column
        band = np.abs(rows - center[None, :]) <= width / 2
        if rng.random() < 0.5:
            band = band.T
        img[band] = kappa_channel
    return img
