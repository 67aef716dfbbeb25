"""Minimal deterministic dense linear algebra.

Everything operates on plain 2-D numpy arrays ("matrices" below): row-major,
float32 for the inference runtime, float64 for optimization and verification.
All functions are pure and thread-safe.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DataError, ShapeError

__all__ = [
    "SvdResult",
    "as_matrix",
    "require_finite",
    "matmul",
    "frobenius_sq",
    "gram",
    "truncated_svd",
    "gram_null_basis",
]

# Eigenvalues of X^T X at or below RANK_TOL times the largest are treated as
# zero when deciding the numerical rank of a Gram matrix.
RANK_TOL = 1e-10

_JACOBI_MAX_SWEEPS = 60


class SvdResult(NamedTuple):
    """Top-k singular triplets: input ~= u @ diag(s) @ v, with v of shape (k, n)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def as_matrix(a, dtype=None) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float array."""
    m = np.ascontiguousarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.dtype not in (np.float32, np.float64):
        m = m.astype(np.float64)
    return m


def require_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if a.size and not np.isfinite(a).all():
        raise DataError(f"{name} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    return a @ b


def frobenius_sq(a) -> float:
    """Squared Frobenius norm: sum of squared entries, equal to trace(A A^T)."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.square(a).sum())


def gram(x: np.ndarray) -> np.ndarray:
    """X^T X for X of shape (samples, features), symmetrized bit-for-bit."""
    x = as_matrix(x)
    g = x.T @ x
    return (g + g.T) * 0.5


def _onesided_jacobi(a: np.ndarray, tol: float):
    """Orthogonalize the columns of `a` by plane rotations.

    Returns (g, r) with a == g @ r.T, r orthogonal and the columns of g
    mutually orthogonal; column norms of g are the singular values.
    """
    g = np.array(a, dtype=np.float64, copy=True, order="F")
    n = g.shape[1]
    r = np.eye(n)
    if n < 2 or g.shape[0] == 0:
        return g, r

    converged = False
    worst = 0.0
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        worst = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                gi = g[:, i]
                gj = g[:, j]
                dii = float(gi @ gi)
                djj = float(gj @ gj)
                dij = float(gi @ gj)
                denom = math.sqrt(dii * djj)
                if denom == 0.0:
                    continue
                ratio = abs(dij) / denom
                worst = max(worst, ratio)
                if ratio <= tol:
                    continue
                rotated = True
                tau = (djj - dii) / (2.0 * dij)
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * gi - s * gj
                new_j = s * gi + c * gj
                g[:, i] = new_i
                g[:, j] = new_j
                ri = r[:, i].copy()
                rj = r[:, j]
                r[:, i] = c * ri - s * rj
                r[:, j] = s * ri + c * rj
        if not rotated:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"Jacobi orthogonalization did not converge in {_JACOBI_MAX_SWEEPS} sweeps",
            residual=worst,
        )
    return g, r


def _jacobi_svd(a: np.ndarray, tol: float):
    """Full SVD via one-sided Jacobi on whichever side has fewer columns."""
    m, n = a.shape
    transposed = n > m
    work = a.T if transposed else a
    g, r = _onesided_jacobi(work, tol)
    s = np.sqrt(np.square(g).sum(axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[:, order]
    r = r[:, order]
    u = np.zeros_like(g)
    nonzero = s > 0
    u[:, nonzero] = g[:, nonzero] / s[nonzero]
    if transposed:
        # a.T = u s r.T  =>  a = r s u.T
        return r, s, u.T
    return u, s, r.T


def truncated_svd(a: np.ndarray, k: int, tol: float = 1e-12) -> SvdResult:
    """Top-k singular triplets of a dense matrix.

    Uses cyclic one-sided Jacobi rotations on the smaller-dimension side,
    which is accurate and simple at the matrix sizes this toolkit targets
    (a few thousand per side at most). Raises ConvergenceError, carrying the
    worst remaining off-diagonal ratio, if the sweep cap is hit.
    """
    a = as_matrix(a, dtype=np.float64)
    if k < 0 or k > min(a.shape):
        raise ShapeError(f"k={k} out of range for shape {a.shape}")
    u, s, vt = _jacobi_svd(a, tol)
    return SvdResult(np.ascontiguousarray(u[:, :k]), s[:k].copy(), np.ascontiguousarray(vt[:k, :]))


def gram_null_basis(x: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the null space of X^T X.

    The basis comes from the same Jacobi factorization applied to X itself:
    right singular directions whose squared singular value falls at or below
    tol times the largest are the numerically-null ones. Returns a (q, d)
    matrix with q = d - numerical_rank(X^T X); q may be zero.
    """
    x = as_matrix(x, dtype=np.float64)
    n, d = x.shape
    if d == 0:
        return np.zeros((0, 0))
    # Orthogonalize the d feature columns directly: the rotation accumulator
    # is d x d and carries the null directions even when n < d.
    g, r = _onesided_jacobi(x, 1e-14)
    sq = np.square(g).sum(axis=0)
    order = np.argsort(-sq, kind="stable")
    sq = sq[order]
    r = r[:, order]
    largest = sq[0] if sq.size else 0.0
    if largest == 0.0:
        return np.eye(d)
    null = sq <= tol * largest
    return np.ascontiguousarray(r[:, null].T)
