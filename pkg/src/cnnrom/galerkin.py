"""Galerkin-projection output layer and the Frobenius condition number.

``sigma_G(P; A, F) = P (P^T A P)^{-1} P^T F`` maps a basis matrix emitted by a
network onto the Galerkin approximation of ``A u = F`` in ``span(P)``.  Its
vector-Jacobian product is written out by hand; the tape primitives below wrap
it for batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .autodiff.tape import as_var, record
from .errors import ShapeError, SingularSystemError

COND_LIMIT = 1e12


@dataclass
class GalerkinCache:
    A_N: np.ndarray
    F_N: np.ndarray
    u_N: np.ndarray
    lu: tuple | None
    AP: np.ndarray
    ATP: np.ndarray
    cond1: float
    symmetrize: bool = False
    skipped: bool = False
    P_ref: np.ndarray | None = None


def _check(P, A, F):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != A.shape[0] or np.shape(F) != (P.shape[0],):
        raise ShapeError(f"incompatible shapes P{P.shape}, A{A.shape}, F{np.shape(F)}")
    return P


def galerkin_activation(P, A, F, symmetrize: bool = False, cond_limit: float = COND_LIMIT,
                        raise_on_singular: bool = True):
    """Return ``(u_hat, cache)`` with ``u_hat = P A_N^{-1} F_N``.

    A reduced matrix whose 1-norm condition number exceeds ``cond_limit`` is
    reported as singular: either :class:`SingularSystemError` is raised or,
    with ``raise_on_singular=False``, a zero prediction with
    ``cache.skipped = True`` is returned.
    """
    P = _check(P, A, F)
    F = np.asarray(F, dtype=float)
    AP = np.asarray(A @ P)
    ATP = np.asarray(A.T @ P)
    A_N = P.T @ AP
    if symmetrize:
        A_N = 0.5 * (A_N + A_N.T)
    F_N = P.T @ F
    with np.errstate(all="ignore"):
        cond1 = float(np.linalg.cond(A_N, 1)) if np.all(np.isfinite(A_N)) else np.inf
    if not np.isfinite(cond1) or cond1 > cond_limit:
        if raise_on_singular:
            raise SingularSystemError(f"reduced matrix condition {cond1:.3e} exceeds {cond_limit:.1e}")
        N = P.shape[1]
        cache = GalerkinCache(A_N, F_N, np.zeros(N), None, AP, ATP, cond1, symmetrize, True, P)
        return np.zeros(P.shape[0]), cache
    lu = sla.lu_factor(A_N)
    u_N = sla.lu_solve(lu, F_N)
    cache = GalerkinCache(A_N, F_N, u_N, lu, AP, ATP, cond1, symmetrize, False, P)
    return P @ u_N, cache


def galerkin_vjp(cache: GalerkinCache, P, A, F, upstream) -> np.ndarray:
    """Gradient of ``upstream . sigma_G(P)`` with respect to ``P``.

    With ``y = A_N^{-1} F_N`` and ``w = A_N^{-T} P^T g``::

        dP = g y^T + F w^T + A P G^T + A^T P G,   G = dL/dA_N = -w y^T

    where ``G`` is symmetrized first if the forward pass symmetrized ``A_N``.
    """
    P = np.asarray(P, dtype=float)
    if cache.P_ref is not None and (cache.P_ref.shape != P.shape or not np.array_equal(cache.P_ref, P)):
        raise ValueError("stale Galerkin cache: P differs from the forward pass")
    g = np.asarray(upstream, dtype=float)
    if cache.skipped:
        return np.zeros_like(P)
    y = cache.u_N
    w = sla.lu_solve(cache.lu, P.T @ g, trans=1)
    G = -np.outer(w, y)
    if cache.symmetrize:
        G = 0.5 * (G + G.T)
    F = np.asarray(F, dtype=float)
    return np.outer(g, y) + np.outer(F, w) + cache.AP @ G.T + cache.ATP @ G


def cond_frobenius(A_N) -> float:
    """``||A||_F * ||A^{-1}||_F``."""
    A_N = np.asarray(A_N, dtype=float)
    try:
        inv = np.linalg.inv(A_N)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("condition number of a singular matrix") from exc
    return float(np.linalg.norm(A_N) * np.linalg.norm(inv))


def cond_frobenius_grad(A_N) -> np.ndarray:
    """``d cond_F / d A = (|B|/|A|) A - (|A|/|B|) B^T B B^T`` with ``B = A^{-1}``."""
    A_N = np.asarray(A_N, dtype=float)
    B = np.linalg.inv(A_N)
    na, nb = np.linalg.norm(A_N), np.linalg.norm(B)
    return (nb / na) * A_N - (na / nb) * (B.T @ B @ B.T)


# tape primitives ---------------------------------------------------------------------


def galerkin(P, As, Fs, symmetrize: bool = False, cond_limit: float = COND_LIMIT):
    """Batched Galerkin activation on the tape.

    ``P`` is a ``(B, n, N)`` Var, ``As`` a sequence of ``B`` (sparse) matrices
    and ``Fs`` a ``(B, n)`` array.  Returns ``(u_hat Var (B, n), caches)``;
    singular samples yield zero rows and ``cache.skipped``.
    """
    P = as_var(P)
    Pv = P.value
    if Pv.ndim != 3 or len(As) != Pv.shape[0]:
        raise ShapeError(f"expected (B, n, N) basis for {len(As)} systems, got {Pv.shape}")
    out = np.empty(Pv.shape[:2])
    caches = []
    for b in range(Pv.shape[0]):
        out[b], c = galerkin_activation(Pv[b], As[b], Fs[b], symmetrize, cond_limit,
                                        raise_on_singular=False)
        c.P_ref = None  # the tape owns P; skip the staleness copy
        caches.append(c)

    def vjp(g):
        return (np.stack([galerkin_vjp(c, Pv[b], As[b], Fs[b], g[b]) for b, c in enumerate(caches)]),)

    return record(out, (P,), vjp), caches


def reduced_matrix(P, As):
    """``A_N = P^T A P`` per batch item, shape ``(B, N, N)``."""
    P = as_var(P)
    Pv = P.value
    AP = np.stack([np.asarray(A @ Pv[b]) for b, A in enumerate(As)])
    ATP = np.stack([np.asarray(A.T @ Pv[b]) for b, A in enumerate(As)])
    out = np.swapaxes(Pv, 1, 2) @ AP

    def vjp(G):
        return (AP @ np.swapaxes(G, 1, 2) + ATP @ G,)

    return record(out, (P,), vjp)


def cond_frobenius_op(A_N):
    """Batched differentiable Frobenius condition number, ``(B, N, N) -> (B,)``."""
    A_N = as_var(A_N)
    Av = A_N.value
    inv = np.linalg.inv(Av)
    na = np.linalg.norm(Av, axis=(1, 2))
    nb = np.linalg.norm(inv, axis=(1, 2))
    out = na * nb

    def vjp(g):
        BT = np.swapaxes(inv, 1, 2)
        grad = (nb / na)[:, None, None] * Av - (na / nb)[:, None, None] * (BT @ inv @ BT)
        return (g[:, None, None] * grad,)

    return record(out, (A_N,), vjp)
