"""Structured-grid finite elements on the unit square.

Nodes are stored row-major with ``values[j, i]`` sitting at ``(x, y) = (i*hx, j*hy)``.
Free (interior) nodes are numbered row-major as well, so a vector on the free
nodes reshapes to an ``(ny-2, nx-2)`` image without permutation.

Bilinear quads use local node order ``(0,0), (1,0), (1,1), (0,1)``.  Linear
triangles split every cell along the ``(0,0)-(1,1)`` diagonal into
``(00, 10, 11)`` and ``(00, 11, 01)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import ConvergenceError, ShapeError

log = logging.getLogger(__name__)

QUAD = "quad"
TRI = "tri"

DIRECT_LIMIT = 5000


@dataclass(eq=False)
class Grid2D:
    nx: int
    ny: int
    kind: str = QUAD
    lx: float = 1.0  # physical extent; the unit square unless a sub-region
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3 nodes per axis, got {self.nx}x{self.ny}")
        if self.kind not in (QUAD, TRI):
            raise ValueError(f"unknown element kind {self.kind!r}")

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def h(self) -> float:
        return self.hx

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def n_free(self) -> int:
        return (self.nx - 2) * (self.ny - 2)

    @property
    def free_shape(self) -> tuple[int, int]:
        return (self.ny - 2, self.nx - 2)

    @cached_property
    def free_nodes(self) -> np.ndarray:
        """Global node ids of the free nodes, in free-index order."""
        j, i = np.mgrid[1 : self.ny - 1, 1 : self.nx - 1]
        return (j * self.nx + i).ravel()

    @cached_property
    def free_index(self) -> np.ndarray:
        """Map global node id -> free index, ``-1`` on the boundary."""
        idx = np.full(self.n_nodes, -1, dtype=np.int64)
        idx[self.free_nodes] = np.arange(self.n_free)
        return idx

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodal coordinates as two ``(ny, nx)`` arrays."""
        x = np.linspace(0.0, self.lx, self.nx)
        y = np.linspace(0.0, self.ly, self.ny)
        return np.meshgrid(x, y)

    @cached_property
    def elements(self) -> np.ndarray:
        """Connectivity ``(n_elem, nv)`` of global node ids."""
        j, i = np.mgrid[0 : self.ny - 1, 0 : self.nx - 1]
        n00 = (j * self.nx + i).ravel()
        n10, n01 = n00 + 1, n00 + self.nx
        n11 = n01 + 1
        if self.kind == QUAD:
            return np.stack([n00, n10, n11, n01], axis=1)
        lower = np.stack([n00, n10, n11], axis=1)
        upper = np.stack([n00, n11, n01], axis=1)
        return np.stack([lower, upper], axis=1).reshape(-1, 3)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def element_area(self) -> float:
        a = self.hx * self.hy
        return a if self.kind == QUAD else a / 2

    @cached_property
    def tri_gradients(self) -> np.ndarray:
        """Constant shape-function gradients ``(2, 3, 2)`` for the two triangle types."""
        hx, hy = self.hx, self.hy
        verts = [
            np.array([[0, 0], [hx, 0], [hx, hy]], dtype=float),
            np.array([[0, 0], [hx, hy], [0, hy]], dtype=float),
        ]
        out = np.empty((2, 3, 2))
        for t, v in enumerate(verts):
            T = np.column_stack([v[1] - v[0], v[2] - v[0]])
            ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
            out[t] = ref @ np.linalg.inv(T)
        return out

    @cached_property
    def stiffness_templates(self) -> np.ndarray:
        """Unit-coefficient element stiffness matrices, one per element type."""
        hx, hy = self.hx, self.hy
        if self.kind == QUAD:
            kx = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]], float)
            ky = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]], float)
            return (hy / (6 * hx) * kx + hx / (6 * hy) * ky)[None]
        g = self.tri_gradients
        return np.einsum("tad,tbd->tab", g, g) * self.element_area

    @cached_property
    def mass_templates(self) -> np.ndarray:
        if self.kind == QUAD:
            m = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]], float)
            return (self.hx * self.hy / 36 * m)[None]
        m = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]], float)
        return np.repeat((self.element_area / 12 * m)[None], 2, axis=0)

    @property
    def element_types(self) -> np.ndarray:
        if self.kind == QUAD:
            return np.zeros(self.n_elements, dtype=np.int64)
        return np.tile([0, 1], self.n_elements // 2)

    def _pattern(self, free_only: bool):
        conn = self.elements
        nv = conn.shape[1]
        if free_only:
            ids = self.free_index[conn]
            n = self.n_free
        else:
            ids = conn
            n = self.n_nodes
        rows = np.repeat(ids, nv, axis=1).ravel()
        cols = np.tile(ids, (1, nv)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        keys = rows[keep] * n + cols[keep]
        uniq, inverse = np.unique(keys, return_inverse=True)
        indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int64)
        indices = (uniq % n).astype(np.int64)
        return keep, inverse.astype(np.int64), indptr, indices, n

    @cached_property
    def full_pattern(self):
        return self._pattern(free_only=False)

    @cached_property
    def free_pattern(self):
        return self._pattern(free_only=True)

    def restrict(self, values: np.ndarray) -> np.ndarray:
        """Nodal ``(ny, nx)`` field -> vector on free nodes."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.ny, self.nx):
            raise ShapeError(f"field shape {values.shape} does not match grid {(self.ny, self.nx)}")
        return values.ravel()[self.free_nodes]

    def extend(self, u_free: np.ndarray, boundary: float = 0.0) -> np.ndarray:
        """Free-node vector -> nodal ``(ny, nx)`` field with constant boundary."""
        out = np.full(self.n_nodes, boundary, dtype=float)
        out[self.free_nodes] = u_free
        return out.reshape(self.ny, self.nx)


def build_grid(nx: int, ny: int, kind: str = QUAD) -> Grid2D:
    return Grid2D(int(nx), int(ny), kind)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)


@dataclass(eq=False)
class FemSystem:
    """Stiffness ``A`` and load ``F`` restricted to the free nodes."""

    A: sp.csr_matrix
    F: np.ndarray
    grid: Grid2D
    report: SolveReport | None = None

    def residual(self, u: np.ndarray) -> np.ndarray:
        return self.A @ u - self.F

    def relative_residual(self, u: np.ndarray) -> float:
        return float(np.linalg.norm(self.residual(u)) / np.linalg.norm(self.F))


def nodal_to_element(K: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Element means of a nodal field, in element order."""
    K = np.asarray(K, dtype=float)
    if K.shape != (grid.ny, grid.nx):
        raise ShapeError(f"field shape {K.shape} does not match grid {(grid.ny, grid.nx)}")
    return K.ravel()[grid.elements].mean(axis=1)


def assemble_local(grid: Grid2D, local: np.ndarray, free_only: bool = True) -> sp.csr_matrix:
    """Sum per-element ``(n_elem, nv, nv)`` matrices into a CSR matrix."""
    keep, inverse, indptr, indices, n = grid.free_pattern if free_only else grid.full_pattern
    vals = np.asarray(local, dtype=float).reshape(-1)[keep]
    data = kernels.scatter_add(inverse, vals, len(indices))
    A = sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(n, n))
    A.eliminate_zeros()
    return A


def assemble_stiffness(coef: np.ndarray, grid: Grid2D, free_only: bool = True) -> sp.csr_matrix:
    """Stiffness for a piecewise-constant coefficient given per element."""
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (grid.n_elements,):
        raise ShapeError(f"expected {grid.n_elements} element coefficients, got {coef.shape}")
    local = coef[:, None, None] * grid.stiffness_templates[grid.element_types]
    return assemble_local(grid, local, free_only)


def assemble_mass(grid: Grid2D) -> sp.csr_matrix:
    """Consistent mass matrix over all nodes."""
    local = np.broadcast_to(
        grid.mass_templates[grid.element_types], (grid.n_elements,) + grid.mass_templates.shape[1:]
    )
    return assemble_local(grid, local, free_only=False)


def element_load(f_elem: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Load on free nodes for a source that is constant on each element."""
    nv = grid.elements.shape[1]
    w = np.repeat(np.asarray(f_elem, dtype=float) * grid.element_area / nv, nv)
    full = kernels.scatter_add(grid.elements.ravel(), w, grid.n_nodes)
    return full[grid.free_nodes]


def nodal_load(f_nodal: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Load on free nodes for a source given by its nodal interpolant."""
    f = np.asarray(f_nodal, dtype=float).ravel()
    return (assemble_mass(grid) @ f)[grid.free_nodes]


def assemble_darcy(K: np.ndarray, grid: Grid2D, f: float | np.ndarray = 1.0) -> FemSystem:
    """Darcy system ``-div(K grad u) = f`` with homogeneous Dirichlet data.

    ``f`` is either a constant or a nodal ``(ny, nx)`` array.
    """
    coef = nodal_to_element(K, grid)
    if not np.all(coef > 0):
        raise ValueError("permeability must be strictly positive")
    A = assemble_stiffness(coef, grid)
    if np.ndim(f) == 0:
        F = element_load(np.full(grid.n_elements, float(f)), grid)
    else:
        F = nodal_load(f, grid)
    return FemSystem(A, F, grid)


def _pcg(A, b, tol, maxiter):
    diag = A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = r / diag
    p = z.copy()
    rz = r @ z
    bnorm = np.linalg.norm(b)
    it = 0
    res = np.linalg.norm(r)
    while res > tol * bnorm and it < maxiter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        z = r / diag
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x, it


def solve_linear(sys: FemSystem | sp.spmatrix, F: np.ndarray | None = None, tol: float = 1e-10,
                 method: str = "auto", maxiter: int = 10000):
    """Solve an SPD system; returns ``(u, SolveReport)``.

    ``method`` is ``"cholesky"``, ``"pcg"`` (Jacobi preconditioned) or
    ``"auto"`` (Cholesky below 5000 unknowns).
    """
    if isinstance(sys, FemSystem):
        A, F = sys.A, sys.F
    else:
        A = sp.csr_matrix(sys)
    F = np.asarray(F, dtype=float)
    n = A.shape[0]
    if method == "auto":
        method = "cholesky" if n < DIRECT_LIMIT else "pcg"
    if method == "cholesky":
        c = sla.cho_factor(A.toarray(), lower=True, check_finite=False)
        u = sla.cho_solve(c, F, check_finite=False)
        its = 1
    elif method == "pcg":
        u, its = _pcg(A, F, tol, maxiter)
    else:
        raise ValueError(f"unknown method {method!r}")
    fn = np.linalg.norm(F)
    res = float(np.linalg.norm(A @ u - F))
    ok = bool(res <= tol * fn or fn == 0.0)
    report = SolveReport(its, res, ok)
    if not ok:
        raise ConvergenceError(f"linear solve stopped at residual {res:.3e} after {its} iterations",
                               [res])
    return u, report


# nonlinear solvers ----------------------------------------------------------


@dataclass
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 50
    max_halvings: int = 30


def nonlinear_source(u):
    return np.sin(10 * np.pi * u) + np.cos(10 * np.pi * u)


def nonlinear_source_deriv(u):
    return 10 * np.pi * (np.cos(10 * np.pi * u) - np.sin(10 * np.pi * u))


def _source_load(u_free, grid, source):
    ubar = grid.extend(u_free).ravel()[grid.elements].mean(axis=1)
    return element_load(source(ubar), grid), ubar


def solve_nonlinear_source(K: np.ndarray, grid: Grid2D, cfg: NewtonConfig | None = None,
                           source: Callable = nonlinear_source,
                           dsource: Callable = nonlinear_source_deriv):
    """Damped Newton for ``-div(K grad u) = s(u)``, ``s(u) = sin(10 pi u) + cos(10 pi u)``.

    The source is evaluated at element means of ``u``.  Returns ``(u_h, sys)``
    where ``sys.F`` is the load frozen at ``u_h`` so ``sys.A @ u_h == sys.F``
    up to the Newton tolerance.
    """
    cfg = cfg or NewtonConfig()
    A = assemble_darcy(K, grid).A
    try:
        u, F, report = _newton_source(A, grid, np.zeros(grid.n_free), source, dsource, cfg)
    except ConvergenceError:
        # continuation in the source argument: s(lam u), lam = 0 gives a linear problem
        u = np.zeros(grid.n_free)
        for lam in np.linspace(0.1, 1.0, 10):
            u, F, report = _newton_source(A, grid, u, lambda v, lam=lam: source(lam * v),
                                          lambda v, lam=lam: lam * dsource(lam * v), cfg)
    return u, FemSystem(A, F, grid, report)


def _newton_source(A, grid, u, source, dsource, cfg):
    nv = grid.elements.shape[1]

    def resid(u):
        F, ubar = _source_load(u, grid, source)
        return A @ u - F, F, ubar

    R, F, ubar = resid(u)
    rnorm = np.linalg.norm(R)
    trace = [rnorm]
    it = 0
    while rnorm > cfg.tol * np.linalg.norm(F):
        if it >= cfg.max_iter:
            raise ConvergenceError(f"Newton did not converge in {cfg.max_iter} iterations", trace)
        w = dsource(ubar) * grid.element_area / nv / nv
        D = assemble_local(grid, np.broadcast_to(w[:, None, None], (grid.n_elements, nv, nv)))
        step = spla.spsolve((A - D).tocsc(), -R)
        t = 1.0
        for _ in range(cfg.max_halvings + 1):
            R_new, F_new, ubar_new = resid(u + t * step)
            n_new = np.linalg.norm(R_new)
            if n_new < (1 - 1e-4 * t) * rnorm:
                break
            t *= 0.5
        else:
            raise ConvergenceError("Newton line search failed", trace)
        u = u + t * step
        R, F, ubar, rnorm = R_new, F_new, ubar_new, n_new
        trace.append(rnorm)
        it += 1
    return u, F, SolveReport(it, float(rnorm), True, trace)


@dataclass
class PLaplaceConfig:
    tol: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 30


def _plaplace_terms(u_free, grid, kappa, p):
    ufull = grid.extend(u_free).ravel()[grid.elements]  # (E, 3)
    G = grid.tri_gradients[grid.element_types]  # (E, 3, 2)
    grad = np.einsum("ea,ead->ed", ufull, G)
    norm = np.linalg.norm(grad, axis=1)
    return G, grad, norm


def plaplace_energy(u_free, grid, kappa, p, F):
    _, _, norm = _plaplace_terms(u_free, grid, kappa, p)
    return float(np.sum(kappa * grid.element_area * norm**p) / p - F @ u_free)


def solve_plaplace(K: np.ndarray, grid: Grid2D, p: float = 3.0, cfg: PLaplaceConfig | None = None,
                   u0: np.ndarray | None = None):
    """Minimize ``(1/p) int K |grad v|^p - int v`` over linear triangles.

    Newton on the discrete energy with Armijo backtracking, started from
    ``u0`` or else the ``p = 2`` solution.  The returned system carries the
    stiffness with element coefficient ``K |grad u_h|^(p-2)`` and the unit load.
    """
    if grid.kind != TRI:
        raise ValueError("p-Laplacian solver needs a triangular grid")
    if p < 2:
        raise ValueError("p must be >= 2")
    cfg = cfg or PLaplaceConfig()
    kappa = nodal_to_element(K, grid)
    lin = assemble_darcy(K, grid)
    F = lin.F
    if u0 is None:
        u, _ = solve_linear(lin, tol=1e-12)
    else:
        u = np.array(u0, dtype=float)
        if u.shape != (grid.n_free,):
            raise ShapeError(f"initial guess has shape {u.shape}, expected ({grid.n_free},)")
    area = grid.element_area
    fnorm = np.linalg.norm(F)

    def gradient(u):
        _, _, norm = _plaplace_terms(u, grid, kappa, p)
        A = assemble_stiffness(kappa * norm ** (p - 2), grid)
        return A @ u - F, A

    E = plaplace_energy(u, grid, kappa, p, F)
    g, A = gradient(u)
    history = [E]
    it = 0
    while np.linalg.norm(g) > cfg.tol * fnorm:
        if it >= cfg.max_iter:
            raise ConvergenceError(f"p-Laplacian Newton stalled after {it} iterations", history)
        G, grad, norm = _plaplace_terms(u, grid, kappa, p)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = np.where(norm[:, None] > 0, grad / norm[:, None], 0.0)
        proj = np.einsum("ead,ed->ea", G, n)
        c = kappa * area * norm ** (p - 2)
        local = c[:, None, None] * (np.einsum("ead,ebd->eab", G, G)
                                    + (p - 2) * proj[:, :, None] * proj[:, None, :])
        H = assemble_local(grid, local)
        step = spla.spsolve(H.tocsc(), -g)
        slope = g @ step
        t = 1.0
        for _ in range(cfg.max_halvings + 1):
            E_new = plaplace_energy(u + t * step, grid, kappa, p, F)
            if E_new <= E + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # energy is flat to round-off: take the full step if it still shrinks the gradient
            t = 1.0
            g_try, _ = gradient(u + step)
            if np.linalg.norm(g_try) >= np.linalg.norm(g):
                raise ConvergenceError("p-Laplacian line search failed", history)
            E_new = plaplace_energy(u + step, grid, kappa, p, F)
        u = u + t * step
        E = E_new
        history.append(E)
        g, A = gradient(u)
        it += 1
    report = SolveReport(it, float(np.linalg.norm(g)), True, history)
    return u, FemSystem(A, F, grid, report)


def relative_test_mean_error(preds: Sequence[np.ndarray], refs: Sequence[np.ndarray]) -> float:
    """Mean over samples of ``||u_h - u||^2 / ||u_h||^2``."""
    if len(preds) != len(refs):
        raise ShapeError(f"{len(preds)} predictions for {len(refs)} references")
    total = 0.0
    for pred, ref in zip(preds, refs):
        pred, ref = np.asarray(pred, float), np.asarray(ref, float)
        if pred.shape != ref.shape:
            raise ShapeError(f"prediction shape {pred.shape} != reference shape {ref.shape}")
        denom = float(ref @ ref) if ref.ndim == 1 else float(np.sum(ref * ref))
        if denom == 0.0:
            raise ZeroDivisionError("reference solution has zero norm")
        total += float(np.sum((ref - pred) ** 2)) / denom
    return total / len(refs)
