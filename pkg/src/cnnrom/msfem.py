"""Multiscale finite elements with oversampling.

A coarse mesh of ``n_c x n_c`` square elements nests in a fine quad grid with
``m`` fine cells per coarse cell.  For every coarse element ``omega`` four
local functions are computed on an oversampled square region ``S``: each
solves ``-div(K grad phi) = 0`` with bilinear Dirichlet data equal to one at
one corner of ``S``.  They are recombined on ``omega`` so that the nodal
values at omega's corners are the Kronecker delta, and traces shared by
neighbouring elements are averaged into conforming global functions.

Array convention: ``values[row, col]`` with rows along y, columns along x.
Corners of a region are listed as ``(x0,y0), (x1,y0), (x1,y1), (x0,y1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem, galerkin as gal
from .dataset import RomDataset
from .errors import ShapeError, SingularSystemError
from .fields import rotate90

CORNERS = ((0, 0), (0, -1), (-1, -1), (-1, 0))
CANONICAL = 3  # x = 0, y = 1, i.e. values[-1, 0]

_counter = {"local_solves": 0}


def local_solve_count() -> int:
    """Number of local basis problems solved (direct or predicted) since import."""
    return _counter["local_solves"]


@dataclass(frozen=True)
class CoarseMesh:
    n_coarse: int  # coarse elements per axis
    m: int  # fine cells per coarse element and axis

    def __post_init__(self):
        if self.n_coarse < 1 or self.m < 1:
            raise ValueError(f"invalid coarse mesh {self}")

    @property
    def H(self) -> float:
        return 1.0 / self.n_coarse

    @property
    def n_fine(self) -> int:
        return self.n_coarse * self.m + 1

    @property
    def n_nodes(self) -> int:
        return (self.n_coarse + 1) ** 2

    @property
    def fine_grid(self) -> fem.Grid2D:
        return fem.Grid2D(self.n_fine, self.n_fine)

    def elements(self):
        """Coarse elements ``(I, J)`` (column, row), row-major."""
        return [(I, J) for J in range(self.n_coarse) for I in range(self.n_coarse)]

    def element_nodes(self, I: int, J: int) -> np.ndarray:
        """Coarse node ids of element ``(I, J)`` in corner order."""
        n = self.n_coarse + 1
        return np.array([J * n + I, J * n + I + 1, (J + 1) * n + I + 1, (J + 1) * n + I])

    def element_block(self, I: int, J: int) -> tuple[slice, slice]:
        """Fine-node (row, col) slices covering element ``(I, J)`` including its boundary."""
        m = self.m
        return slice(J * m, (J + 1) * m + 1), slice(I * m, (I + 1) * m + 1)

    def oversampled_block(self, I: int, J: int, ring) -> tuple[slice, slice]:
        """Square fine-node region of ``1 + 2 ring`` coarse cells containing element ``(I, J)``.

        The window is shifted inwards at the domain boundary so every region
        has the same size; ``ring='all'`` selects the whole domain.
        """
        n = self.n_coarse
        if ring == "all" or 1 + 2 * int(ring) >= n:
            return slice(0, self.n_fine), slice(0, self.n_fine)
        w = 1 + 2 * int(ring)
        i0 = min(max(I - int(ring), 0), n - w)
        j0 = min(max(J - int(ring), 0), n - w)
        m = self.m
        return slice(j0 * m, (j0 + w) * m + 1), slice(i0 * m, (i0 + w) * m + 1)


def corner_data(shape: tuple[int, int], corner: int) -> np.ndarray:
    """Bilinear function on a region, one at ``corner`` and zero at the other three."""
    ny, nx = shape
    s = np.linspace(0.0, 1.0, nx)[None, :]
    t = np.linspace(0.0, 1.0, ny)[:, None]
    sx = (1 - s, s, s, 1 - s)[corner]
    ty = (1 - t, 1 - t, t, t)[corner]
    return sx * ty


def region_grid(shape: tuple[int, int], h: float | None = None) -> fem.Grid2D:
    """Quad grid with square cells for a ``(ny, nx)`` nodal region."""
    ny, nx = shape
    h = h if h is not None else 1.0 / (max(nx, ny) - 1)
    return fem.Grid2D(nx, ny, fem.QUAD, lx=h * (nx - 1), ly=h * (ny - 1))


def _region_matrices(K_region: np.ndarray):
    K_region = np.asarray(K_region, dtype=float)
    if K_region.ndim != 2 or min(K_region.shape) < 3:
        raise ShapeError(f"local region needs at least 3x3 nodes, got {K_region.shape}")
    if np.any(K_region <= 0):
        raise ValueError("local problems need a positive coefficient")
    grid = region_grid(K_region.shape)
    A = fem.assemble_stiffness(fem.nodal_to_element(K_region, grid), grid, free_only=False)
    free = grid.free_nodes
    A_rows = A[free]
    return grid, A_rows[:, free].tocsc(), A_rows


def local_system(K_region: np.ndarray, corner: int = CANONICAL):
    """Homogeneous-part system of a local problem: ``A_II phi_I = -A_IB g``.

    Returns ``(FemSystem, g)`` with ``g`` the nodal Dirichlet lift.
    """
    grid, A_II, A_rows = _region_matrices(K_region)
    g = corner_data(K_region.shape, corner)
    gb = g.ravel().copy()
    gb[grid.free_nodes] = 0.0
    return fem.FemSystem(sp.csr_matrix(A_II), -(A_rows @ gb), grid), g


def solve_local_basis(K_region: np.ndarray, corners=range(4)) -> np.ndarray:
    """Local basis functions on a region, one factorization for all corners.

    Returns ``(len(corners), ny, nx)``; each function is discrete harmonic in
    the interior and equals the bilinear corner data on the region boundary.
    """
    grid, A_II, A_rows = _region_matrices(K_region)
    corners = list(corners)
    G = np.stack([corner_data(K_region.shape, c).ravel() for c in corners], axis=1)
    Gb = G.copy()
    Gb[grid.free_nodes] = 0.0
    try:
        lu = spla.splu(A_II)
    except RuntimeError as exc:
        raise SingularSystemError("singular local stiffness matrix") from exc
    out = G.copy()
    out[grid.free_nodes] = lu.solve(-(A_rows @ Gb))
    _counter["local_solves"] += len(corners)
    return out.T.reshape(len(corners), *K_region.shape)


def _corner_rotation(corner: int) -> int:
    """Clockwise quarter turns moving ``corner`` of a square onto the canonical corner."""
    ind = np.zeros((2, 2))
    ind[CORNERS[corner]] = 1.0
    for t in range(4):
        if rotate90(ind, t)[CORNERS[CANONICAL]] == 1.0:
            return t
    raise AssertionError("unreachable")


def solve_by_rotation(K_region: np.ndarray, predictor: Callable, corners=range(4)) -> np.ndarray:
    """Corner functions from a canonical-corner ``predictor(K) -> (n, n)`` field via rotations."""
    K_region = np.asarray(K_region, dtype=float)
    if K_region.shape[0] != K_region.shape[1]:
        raise ShapeError("rotation-based prediction needs square regions")
    out = []
    for c in corners:
        t = _corner_rotation(c)
        out.append(rotate90(predictor(rotate90(K_region, t)), -t))
    return np.stack(out)


def direct_predictor(K_region: np.ndarray) -> np.ndarray:
    """Canonical-corner local solve, same signature as learned predictors."""
    return solve_local_basis(K_region, [CANONICAL])[0]


def galerkin_net_predictor(net) -> Callable:
    """Canonical-corner predictor from a trained basis net pushed through the Galerkin layer."""

    def predict(K_region):
        sys, g = local_system(K_region, CANONICAL)
        P = net.basis(K_region[1:-1, 1:-1])[0]
        u, _ = gal.galerkin_activation(P, sys.A, sys.F, net.cfg.symmetrize)
        _counter["local_solves"] += 1
        out = g.ravel().copy()
        out[sys.grid.free_nodes] = u
        return out.reshape(K_region.shape)

    return predict


def oversample_recombine(phi_tilde: np.ndarray, omega: tuple[slice, slice]):
    """Recombine oversampled functions into four functions on ``omega`` with nodal delta values.

    ``phi_tilde`` is ``(4, Sy, Sx)`` on the oversampled region and ``omega``
    the (row, col) slices of the target element inside it.  Returns
    ``(phi_ms (4, my, mx), C)`` with ``phi_ms^i = sum_k C[i, k] phi_tilde^k``.
    """
    local = np.asarray(phi_tilde, dtype=float)[:, omega[0], omega[1]]
    V = np.stack([[p[c] for c in CORNERS] for p in local])  # V[k, j] = phi~_k(x_j)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystemError(f"nodal value matrix is singular (cond {cond:.2e})")
    C = np.linalg.inv(V)
    phi = np.einsum("ik,kyx->iyx", C, local)
    for i in range(4):  # exact delta property
        for j, c in enumerate(CORNERS):
            phi[i][c] = float(i == j)
    return phi, C


@dataclass(eq=False)
class MsBasisSet:
    mesh: CoarseMesh
    local: np.ndarray  # (n_elem, 4, m+1, m+1) recombined element functions
    coeffs: np.ndarray  # (n_elem, 4, 4) recombination matrices
    B: sp.csr_matrix  # (n_fine_nodes, n_coarse_nodes) conforming global basis
    ring: object = 1
    n_local_solves: int = 0
    meta: dict = field(default_factory=dict)

    def restricted(self) -> sp.csr_matrix:
        """Basis on fine free nodes for the interior coarse nodes (homogeneous Dirichlet)."""
        grid = self.mesh.fine_grid
        n = self.mesh.n_coarse + 1
        j, i = np.mgrid[1 : n - 1, 1 : n - 1]
        return self.B[grid.free_nodes][:, (j * n + i).ravel()].tocsr()


def assemble_global_basis(mesh: CoarseMesh, local: np.ndarray) -> sp.csr_matrix:
    """Glue element functions into global ones, averaging over the elements sharing a fine node."""
    nf = mesh.n_fine
    ids = np.arange(nf * nf).reshape(nf, nf)
    rows, cols, vals = [], [], []
    count = np.zeros(nf * nf)
    for e, (I, J) in enumerate(mesh.elements()):
        block = ids[mesh.element_block(I, J)].ravel()
        count[block] += 1
        for i, node in enumerate(mesh.element_nodes(I, J)):
            rows.append(block)
            cols.append(np.full(block.size, node))
            vals.append(local[e, i].ravel())
    B = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nf * nf, mesh.n_nodes)).tocsr()
    B = sp.diags(1.0 / count) @ B
    B.eliminate_zeros()
    return B.tocsr()


def build_ms_basis(K: np.ndarray, mesh: CoarseMesh, ring=1, predictor: Callable | None = None) -> MsBasisSet:
    """Oversampled multiscale basis for a fine nodal field ``K``.

    ``predictor=None`` solves every local problem directly; otherwise
    ``predictor(K_region)`` supplies the canonical-corner function and the
    other corners follow by rotation.
    """
    K = np.asarray(K, dtype=float)
    if K.shape != (mesh.n_fine, mesh.n_fine):
        raise ShapeError(f"field {K.shape} does not match the {mesh.n_fine}-node fine grid")
    start = local_solve_count()
    locals_, coeffs = [], []
    for I, J in mesh.elements():
        S = mesh.oversampled_block(I, J, ring)
        KS = K[S]
        phis = solve_local_basis(KS) if predictor is None else solve_by_rotation(KS, predictor)
        eb = mesh.element_block(I, J)
        omega = (slice(eb[0].start - S[0].start, eb[0].stop - S[0].start),
                 slice(eb[1].start - S[1].start, eb[1].stop - S[1].start))
        phi, C = oversample_recombine(phis, omega)
        locals_.append(phi)
        coeffs.append(C)
    local = np.stack(locals_)
    B = assemble_global_basis(mesh, local)
    return MsBasisSet(mesh, local, np.stack(coeffs), B, ring, local_solve_count() - start,
                      {"predicted": predictor is not None})


def make_source(kind: str = "constant", a: float = 1.0, b: float = 1.0, c: float = 1.0) -> Callable:
    """Source selector: ``constant`` (c), ``exp-sum`` exp(a x + b y), ``sin-sum`` sin(2 pi (a x + b y))."""
    if kind == "constant":
        return lambda X, Y: np.full_like(X, c, dtype=float)
    if kind == "exp-sum":
        return lambda X, Y: np.exp(a * X + b * Y)
    if kind == "sin-sum":
        return lambda X, Y: np.sin(2 * np.pi * a * X + 2 * np.pi * b * Y)
    raise ValueError(f"unknown source {kind!r}; choose constant, exp-sum or sin-sum")


@dataclass
class MsResult:
    u_ms: np.ndarray  # free-node vector on the fine grid
    u_ref: np.ndarray
    rel_error: float  # ||u_ms - u_ref|| / ||u_ref||
    A_c: sp.csr_matrix
    F_c: np.ndarray


def msfem_solve(K: np.ndarray, f: Callable, basis: MsBasisSet, u_ref: np.ndarray | None = None) -> MsResult:
    """Coarse Galerkin solve in the span of a multiscale basis set.

    Coarse stiffness and load integrate the basis against ``K`` and ``f`` on
    the fine grid; ``u_ref`` (fine solve) is computed when not supplied.
    """
    grid = basis.mesh.fine_grid
    X, Y = grid.coords
    sys = fem.assemble_darcy(K, grid, f(X, Y))
    if u_ref is None:
        u_ref, _ = fem.solve_linear(sys, tol=1e-12)
    Bf = basis.restricted()
    A_c = (Bf.T @ sys.A @ Bf).tocsr()
    F_c = Bf.T @ sys.F
    try:
        u_c = spla.spsolve(A_c.tocsc(), F_c)
    except RuntimeError as exc:
        raise SingularSystemError("singular coarse system") from exc
    if not np.all(np.isfinite(u_c)):
        raise SingularSystemError("singular coarse system")
    u_ms = Bf @ u_c
    err = float(np.linalg.norm(u_ms - u_ref) / np.linalg.norm(u_ref))
    return MsResult(u_ms, u_ref, err, A_c, F_c)


def bilinear_prolongation(mesh: CoarseMesh) -> sp.csr_matrix:
    """Standard coarse Q1 hats sampled on the fine grid, ``(n_fine_nodes, n_coarse_nodes)``."""
    nc, m = mesh.n_coarse, mesh.m
    t = np.arange(mesh.n_fine) / m
    P1 = np.maximum(0.0, 1.0 - np.abs(t[:, None] - np.arange(nc + 1)[None, :]))
    return sp.csr_matrix(np.kron(P1, P1))


def rotational_dataset(patches, seed=None) -> RomDataset:
    """Canonical-corner local problems for each square patch and its three quarter turns.

    Each sample stores the interior of the patch problem: ``u`` the interior
    values, ``A = A_II`` and ``F = -A_IB g``, so the basis net and Galerkin
    layer apply unchanged.  ``seed`` (optional) shuffles the sample order.
    """
    patches = [np.asarray(p, dtype=float) for p in patches]
    if not patches:
        raise ValueError("no patches")
    shape = patches[0].shape
    if shape[0] != shape[1] or any(p.shape != shape for p in patches):
        raise ShapeError("patches must be square and share one shape")
    Ks, us, As, Fs, tags = [], [], [], [], []
    for i, P in enumerate(patches):
        for t in range(4):
            Kr = rotate90(P, t)
            sys, _ = local_system(Kr, CANONICAL)
            phi = solve_local_basis(Kr, [CANONICAL])[0]
            Ks.append(Kr)
            us.append(sys.grid.restrict(phi))
            As.append(sys.A)
            Fs.append(sys.F)
            tags.append(4 * i + t)
    order = np.arange(len(Ks))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(Ks))
    grid = region_grid(shape)
    return RomDataset(grid, np.array(Ks)[order], np.array(us)[order], [As[k] for k in order],
                      np.array(Fs)[order], [tags[k] for k in order])
