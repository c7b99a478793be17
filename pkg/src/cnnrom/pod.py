"""POD snapshot compression and the classical Galerkin reduced-basis baseline."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import SingularSystemError, ShapeError
from .fem import FemSystem, relative_test_mean_error


@dataclass
class PodBasis:
    P: np.ndarray
    singular_values: np.ndarray
    rank_deficient: bool = False

    @property
    def N(self) -> int:
        return self.P.shape[1]

    def tail_energy(self) -> float:
        """Sum of squared singular values beyond the first ``N``."""
        return float(np.sum(self.singular_values[self.N :] ** 2))

    def project(self, U: np.ndarray) -> np.ndarray:
        return self.P @ (self.P.T @ U)


def build_pod_basis(snapshots: np.ndarray, N: int, rtol: float = 1e-12) -> PodBasis:
    """Leading ``N`` left singular vectors of the raw (uncentered) snapshot matrix.

    Columns of ``snapshots`` are solution vectors.  If the snapshots have rank
    below ``N`` the trailing columns complete an orthonormal basis from the
    null space and ``rank_deficient`` is set.
    """
    U = np.asarray(snapshots, dtype=float)
    if U.ndim != 2:
        raise ShapeError("snapshots must be a 2-D (n_dof, n_snapshots) matrix")
    n, M = U.shape
    if not 1 <= N <= n:
        raise ValueError(f"basis size {N} outside [1, {n}]")
    full = N > M
    W, s, _ = np.linalg.svd(U, full_matrices=full)
    rank = int(np.sum(s > rtol * (s[0] if len(s) else 0.0)))
    P = W[:, :N].copy()
    deficient = rank < N
    if deficient:
        warnings.warn(f"snapshot rank {rank} < requested N={N}; completing from the null space")
        if P.shape[1] < N:
            Q, _ = np.linalg.qr(np.column_stack([P, np.eye(n)]))
            P = Q[:, :N]
    # deterministic sign: largest-magnitude entry positive
    signs = np.sign(P[np.abs(P).argmax(axis=0), np.arange(P.shape[1])])
    P = P * np.where(signs == 0, 1.0, signs)
    return PodBasis(P, s, deficient)


def galerkin_reduce_solve(P, sys: FemSystem | tuple) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``(P^T A P) u_N = P^T F``; returns ``(u_N, P u_N)``."""
    P = P.P if isinstance(P, PodBasis) else np.asarray(P, dtype=float)
    A, F = (sys.A, sys.F) if isinstance(sys, FemSystem) else sys
    if P.shape[0] != A.shape[0]:
        raise ShapeError(f"basis has {P.shape[0]} rows, system has {A.shape[0]} unknowns")
    AP = A @ P
    A_N = P.T @ AP
    F_N = P.T @ F
    try:
        lu = sla.lu_factor(A_N, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:
        raise SingularSystemError(str(exc)) from exc
    if np.any(np.diag(lu[0]) == 0):
        raise SingularSystemError("reduced matrix is singular")
    u_N = sla.lu_solve(lu, F_N)
    return u_N, P @ u_N


def pod_error_curve(train_snapshots: np.ndarray, test_systems: Sequence[FemSystem],
                    test_solutions: Sequence[np.ndarray], Ns: Sequence[int]) -> list[tuple[int, float]]:
    """Relative test mean error of POD-Galerkin for each basis size in ``Ns``."""
    if len(test_systems) == 0 or len(test_systems) != len(test_solutions):
        raise ValueError("need matching, non-empty test systems and solutions")
    rows = []
    for N in Ns:
        basis = build_pod_basis(train_snapshots, int(N))
        preds = [galerkin_reduce_solve(basis, s)[1] for s in test_systems]
        rows.append((int(N), relative_test_mean_error(preds, test_solutions)))
    return rows
