"""Dense matrix helpers and a one-sided Jacobi SVD.

Everything operates on 2-D float64 numpy arrays. The SVD is hand-rolled
rather than delegated to LAPACK because the adapter initializations (and
their tests) need bit-reproducible factors with a fixed sign convention;
cyclic one-sided Jacobi is simple and extremely accurate at the matrix
sizes this package targets (tens of rows/columns).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericError",
    "SvdFactors",
    "TruncatedSvd",
    "as_matrix",
    "matmul",
    "column_norms",
    "frobenius_norm",
    "svd",
    "truncate_svd",
]

# Sweep cap and relative off-diagonal tolerance for the Jacobi iteration.
MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


class NumericError(RuntimeError):
    """An iterative routine failed to converge or produced non-finite values."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting empty dims and non-finite entries."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def column_norms(w) -> np.ndarray:
    """Euclidean norm of every column of w."""
    w = np.asarray(w, dtype=np.float64)
    return np.linalg.norm(w, axis=0)


def frobenius_norm(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.sqrt((w * w).sum()))


@dataclass
class SvdFactors:
    """Thin SVD w = u @ diag(sigma) @ v.T with sigma sorted non-increasing.

    u is d x p and v is k x p with orthonormal columns, p = min(d, k).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


@dataclass
class TruncatedSvd:
    """Leading r columns/values of an SvdFactors."""

    u_r: np.ndarray
    sigma_r: np.ndarray
    v_r: np.ndarray


def svd(w) -> SvdFactors:
    """Thin SVD via cyclic one-sided Jacobi.

    The iteration always runs on the tall orientation (the input is
    transposed internally when d < k). Signs are normalized so the
    largest-magnitude entry of each left singular vector is positive
    (first such entry on ties), making the output deterministic and
    directly comparable across runs.
    """
    w = as_matrix(w)
    d, k = w.shape
    if d >= k:
        u, sigma, v = _jacobi_tall(w)
    else:
        v, sigma, u = _jacobi_tall(w.T)
    for i in range(sigma.size):
        col = u[:, i]
        if col[np.argmax(np.abs(col))] < 0.0:
            u[:, i] = -col
            v[:, i] = -v[:, i]
    return SvdFactors(u, sigma, v)


def _jacobi_tall(w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall matrix (rows >= cols): returns (u, sigma, v)."""
    m = w.copy()
    n_cols = m.shape[1]
    v = np.eye(n_cols)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for i in range(n_cols - 1):
            for j in range(i + 1, n_cols):
                gii = float(m[:, i] @ m[:, i])
                gjj = float(m[:, j] @ m[:, j])
                gij = float(m[:, i] @ m[:, j])
                if abs(gij) <= JACOBI_TOL * math.sqrt(gii * gjj):
                    continue
                rotated = True
                # Rotation angle from t^2 + 2*tau*t - 1 = 0; the smaller
                # root in magnitude avoids cancellation.
                tau = (gjj - gii) / (2.0 * gij)
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                mi = m[:, i].copy()
                m[:, i] = c * mi - s * m[:, j]
                m[:, j] = s * mi + c * m[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            break
    else:
        raise NumericError(
            "svd did not converge within "
            f"{MAX_SWEEPS} sweeps; worst off-diagonal ratio {_worst_offdiag(m):.3e}"
        )

    norms = np.linalg.norm(m, axis=0)
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    v = v[:, order]
    u = np.zeros_like(m)
    for idx, col in enumerate(order):
        if sigma[idx] > 0.0:
            u[:, idx] = m[:, col] / sigma[idx]
        else:
            u[:, idx] = _orthonormal_completion(u)
    return u, sigma, v


def _worst_offdiag(m: np.ndarray) -> float:
    g = m.T @ m
    diag = np.sqrt(np.diag(g))
    scale = np.outer(diag, diag)
    ratios = np.abs(g) / np.where(scale > 0.0, scale, 1.0)
    np.fill_diagonal(ratios, 0.0)
    return float(ratios.max())


def _orthonormal_completion(u: np.ndarray) -> np.ndarray:
    """Deterministic unit vector orthogonal to the (partial) columns of u.

    Only reached for exactly rank-deficient inputs, where some columns of
    the rotated matrix are zero and carry no direction of their own.
    """
    best = None
    best_norm = 0.0
    for basis in range(u.shape[0]):
        cand = np.zeros(u.shape[0])
        cand[basis] = 1.0
        cand -= u @ (u.T @ cand)
        norm = float(np.linalg.norm(cand))
        if norm > best_norm + 1e-12:
            best, best_norm = cand, norm
    if best is None or best_norm == 0.0:
        raise NumericError("cannot extend singular basis: no orthogonal direction left")
    best /= best_norm
    # One re-orthogonalization pass keeps the completion at working precision.
    best -= u @ (u.T @ best)
    return best / np.linalg.norm(best)


def truncate_svd(f: SvdFactors, r: int) -> TruncatedSvd:
    """Leading-r truncation; by Eckart-Young the best rank-r approximation."""
    p = f.sigma.size
    if not 1 <= r <= p:
        raise ValueError(f"rank r={r} out of range 1..{p}")
    return TruncatedSvd(f.u[:, :r].copy(), f.sigma[:r].copy(), f.v[:, :r].copy())
