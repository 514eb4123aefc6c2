"""Small dense linear-algebra kernel.

Everything here is a thin, deterministic layer over LAPACK (via numpy):
inputs are validated as finite 2-D float arrays and every returned basis
follows a fixed sign convention, so traces are reproducible run to run.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateInputError, DimensionError, NumericalFailure


class Norms(NamedTuple):
    frobenius: float
    spectral: float
    nuclear: float


def as_matrix(A, name="A") -> np.ndarray:
    """Return ``A`` as a finite 2-D float64 array, or raise."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains NaN or Inf")
    return A


def _fix_signs(Q: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Sign per column so that the first entry with |q| > tol is positive."""
    signs = np.ones(Q.shape[1])
    for j in range(Q.shape[1]):
        col = Q[:, j]
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            signs[j] = -1.0
    return signs


def svd(A):
    """Thin SVD ``A = U @ diag(sigma) @ V.T`` with descending ``sigma``.

    Each column of ``U`` has its first significant entry positive; ``V`` is
    flipped to match. Columns of ``U`` whose singular value is zero get the
    same treatment on their own.
    """
    A = as_matrix(A)
    m, n = A.shape
    if m == 0 or n == 0:
        k = min(m, n)
        return np.zeros((m, k)), np.zeros(k), np.zeros((n, k))
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    V = Vt.T
    # tolerance keeps tiny round-off entries from deciding the sign
    signs = _fix_signs(U, tol=1e-12 * np.max(np.abs(U), initial=0.0))
    return U * signs, s, V * signs


def sym_eig(S):
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending."""
    S = as_matrix(S, "S")
    if S.shape[0] != S.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {S.shape}")
    scale = np.linalg.norm(S)
    asym = np.linalg.norm(S - S.T)
    if asym > 1e-8 * max(scale, 1e-300) and asym > 0:
        raise ValueError(f"matrix is not symmetric (||S - S^T|| = {asym:.3e})")
    S = 0.5 * (S + S.T)
    try:
        lam, Q = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigh did not converge: {exc}") from exc
    lam, Q = lam[::-1], Q[:, ::-1]
    signs = _fix_signs(Q, tol=1e-12)
    return lam.copy(), Q * signs


def pinv(S, rel_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values <= rel_tol * sigma_max are dropped."""
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    U, s, V = svd(S)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((S.shape[1], S.shape[0]))
    keep = s > rel_tol * s[0]
    return (V[:, keep] / s[keep]) @ U[:, keep].T


def qr_orthonormal(A, rank_tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis of the columns of a tall matrix with positive R diagonal."""
    A = as_matrix(A)
    d, K = A.shape
    if d < K:
        raise DimensionError(f"qr_orthonormal needs rows >= cols, got {A.shape}")
    Q, R = np.linalg.qr(A, mode="reduced")
    diag = np.diag(R)
    scale = np.max(np.abs(A), initial=0.0)
    if K and (scale == 0.0 or np.min(np.abs(diag)) <= rank_tol * scale * max(d, 1)):
        raise DegenerateInputError("input does not have full column rank")
    return Q * np.sign(diag)


def norms(A) -> Norms:
    A = as_matrix(A)
    s = svd(A)[1]
    spectral = float(s[0]) if s.size else 0.0
    return Norms(float(np.linalg.norm(A)), spectral, float(np.sum(s)))


def spectral_norm(A) -> float:
    return norms(A).spectral


def nuclear_norm(A) -> float:
    return norms(A).nuclear
