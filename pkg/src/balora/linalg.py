"""Dense matrix kernels: one-sided Jacobi SVD, nuclear norm, covariance, row normalization.

Matrices are plain 2-D ``float64`` numpy arrays. Every function here is pure.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from balora.errors import NoConvergence, NonFinite, ShapeMismatch, TooFewSamples

MAX_SWEEPS = 60
JACOBI_TOL = 1e-12
NORMALIZE_EPS = 1e-12


class SvdFactors(NamedTuple):
    """Thin SVD ``M = u @ diag(s) @ v.T`` with ``p = min(m, n)`` components."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def as_matrix(x, *, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatch(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return arr


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament ordering of all column pairs; each round holds disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a < 0 or b < 0:
                continue
            ps.append(min(a, b))
            qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of a tall matrix by plane rotations.

    Returns the rotated matrix (mutually orthogonal columns) and the
    accumulated right rotation ``V`` with ``a @ V == rotated``.
    """
    w = a.copy()
    n = w.shape[1]
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            scale = np.sqrt(alpha * beta)
            active = (scale > 0.0) & (np.abs(gamma) > tol * scale)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return w, v
    raise NoConvergence(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def _complete_basis(u: np.ndarray, missing: np.ndarray) -> None:
    """Fill columns ``missing`` of ``u`` with unit vectors orthogonal to the rest, in place."""
    m = u.shape[0]
    have = [j for j in range(u.shape[1]) if j not in set(missing.tolist())]
    basis = u[:, have]
    for j in missing:
        cand = np.eye(m)
        for _ in range(2):
            cand = cand - basis @ (basis.T @ cand)
        norms = np.linalg.norm(cand, axis=0)
        k = int(np.argmax(norms))
        u[:, j] = cand[:, k] / norms[k]
        basis = np.column_stack([basis, u[:, j]])


def svd(m, *, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS) -> SvdFactors:
    """Thin SVD by one-sided (Hestenes) Jacobi.

    Singular values come back in descending order (stable for ties) and each
    column of ``u`` has its largest-magnitude entry non-negative, so the
    factorization is deterministic.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    work = a if rows >= cols else a.T
    w, v = _jacobi_tall(work, tol, max_sweeps)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros_like(w)
    nz = s > 0.0
    u[:, nz] = w[:, nz] / s[nz]
    if not nz.all():
        _complete_basis(u, np.flatnonzero(~nz))
    if rows < cols:
        u, v = v, u
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    return SvdFactors(u * signs, s, v * signs)


def singular_values(m) -> np.ndarray:
    return svd(m).s


def nuclear_norm(m) -> float:
    """Sum of singular values."""
    return float(np.sum(svd(m).s))


def covariance(f) -> np.ndarray:
    """Sample covariance of the rows of ``f`` (rows are samples), shape ``D x D``."""
    f = as_matrix(f)
    n = f.shape[0]
    if n < 2:
        raise TooFewSamples(f"covariance needs at least 2 rows, got {n}")
    centered = f - f.mean(axis=0)
    c = centered.T @ centered / (n - 1)
    return 0.5 * (c + c.T)


def l2_normalize_rows(f, eps: float = NORMALIZE_EPS) -> np.ndarray:
    """Scale each row to unit L2 norm; rows with norm below ``eps`` pass through."""
    f = np.asarray(f, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    safe = np.where(norms < eps, 1.0, norms)
    return f / safe
