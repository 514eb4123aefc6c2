"""Simplex ETF construction and the neural-collapse metrics NC1-NC4.

Feature matrices are ``d x N`` with one column per sample, laid out
class-major: column ``j`` belongs to class ``j % K`` (sample groups of ``K``
columns, one per class, repeated ``n`` times).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numlin
from .exceptions import DegenerateInputError, DimensionError

PINV_REL_TOL = 1e-10


def centering(K: int) -> np.ndarray:
    """``I_K - 11^T / K``."""
    return np.eye(K) - np.full((K, K), 1.0 / K)


def etf_gram(K: int) -> np.ndarray:
    return K / (K - 1) * centering(K)


def standard_etf(K: int) -> np.ndarray:
    """Standard K-simplex ETF, ``sqrt(K / (K - 1)) (I - 11^T / K)``."""
    if K < 2:
        raise ValueError("a simplex ETF needs K >= 2")
    return np.sqrt(K / (K - 1)) * centering(K)


def embedded_etf(K: int, d: int, seed: int = 0) -> np.ndarray:
    """Simplex ETF rotated into ``R^d`` by a seeded random orthonormal frame.

    The Gram matrix equals that of :func:`standard_etf`; only the embedding
    depends on ``seed``. With ``d == K`` and ``seed=None`` the frame is the
    identity.
    """
    if d < K:
        raise DimensionError(f"need d >= K for an embedded ETF, got d={d}, K={K}")
    if seed is None:
        P = np.eye(d, K)
    else:
        rng = np.random.default_rng(seed)
        P = numlin.qr_orthonormal(rng.standard_normal((d, K)))
    return P @ standard_etf(K)


@dataclass
class ClassStats:
    h_G: np.ndarray
    class_means: np.ndarray
    Sigma_W: np.ndarray
    Sigma_B: np.ndarray


def class_major_labels(n: int, K: int) -> np.ndarray:
    return np.tile(np.arange(K), n)


def _check_layout(H, n, K):
    H = numlin.as_matrix(H, "H")
    if H.shape[1] != n * K:
        raise DimensionError(f"H has {H.shape[1]} columns, expected n*K = {n * K}")
    return H


def class_stats(H, n: int, K: int) -> ClassStats:
    H = _check_layout(H, n, K)
    d = H.shape[0]
    blocks = H.reshape(d, n, K)  # [:, i, k] = h_{k,i}
    means = blocks.mean(axis=1)
    h_G = means.mean(axis=1)
    within = (blocks - means[:, None, :]).reshape(d, -1)
    Sigma_W = within @ within.T / (n * K)
    centred = means - h_G[:, None]
    Sigma_B = centred @ centred.T / K
    return ClassStats(h_G, means, Sigma_W, Sigma_B)


def stats_from_labels(X, labels):
    """Reorder an ``N x d`` feature dump with arbitrary labels to class-major ``d x N``.

    Classes must be balanced; returns ``(H, n, K)``.
    """
    X = numlin.as_matrix(X, "features")
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    if np.any(counts != counts[0]):
        raise ValueError(f"classes are unbalanced: counts {counts.tolist()}")
    K, n = classes.size, int(counts[0])
    H = np.empty((X.shape[1], n * K))
    for k, c in enumerate(classes):
        H[:, k::K] = X[labels == c].T
    return H, n, K


def nc1(H, n: int, K: int, return_flag: bool = False):
    """``trace(Sigma_W Sigma_B^+) / K``.

    When every class mean coincides, ``Sigma_B^+ = 0`` and the metric is 0;
    pass ``return_flag=True`` to also receive that degeneracy flag.
    """
    st = class_stats(H, n, K)
    # class means equal up to rounding count as coincident
    spread = np.max(np.abs(st.class_means - st.h_G[:, None]))
    scale = np.max(np.abs(st.class_means)) if st.class_means.size else 0.0
    degenerate = bool(spread <= 64 * np.finfo(float).eps * scale)
    val = 0.0 if degenerate else float(np.trace(st.Sigma_W @ numlin.pinv(st.Sigma_B, PINV_REL_TOL)) / K)
    return (val, degenerate) if return_flag else val


def _etf_distance(M, K):
    norm = np.linalg.norm(M)
    return float(np.linalg.norm(M / norm - centering(K) / np.sqrt(K - 1)))


def nc2(W) -> float:
    """Distance of the normalized classifier Gram ``WW^T`` from the unit-energy ETF."""
    W = numlin.as_matrix(W, "W")
    WW = W @ W.T
    if not np.any(WW):
        raise DegenerateInputError("NC2 is undefined for W = 0")
    return _etf_distance(WW, W.shape[0])


def nc3(W, H, n: int, K: int) -> float:
    """Self-duality gap between ``W`` and the centred class-mean matrix."""
    W = numlin.as_matrix(W, "W")
    st = class_stats(H, n, K)
    Hbar = st.class_means - st.h_G[:, None]
    WH = W @ Hbar
    if not np.any(WH):
        raise DegenerateInputError("NC3 is undefined when W @ Hbar = 0")
    return _etf_distance(WH, K)


def nc4(W, b, H) -> float:
    """``|| b + W h_G ||``."""
    W = numlin.as_matrix(W, "W")
    H = numlin.as_matrix(H, "H")
    return float(np.linalg.norm(np.asarray(b, dtype=np.float64) + W @ H.mean(axis=1)))


def nc_metrics(W, H, b, n: int, K: int) -> dict:
    """All four metrics; undefined ones (zero classifier) come back as NaN."""
    out = {"nc1": nc1(H, n, K)}
    try:
        out["nc2"] = nc2(W)
    except DegenerateInputError:
        out["nc2"] = float("nan")
    try:
        out["nc3"] = nc3(W, H, n, K)
    except DegenerateInputError:
        out["nc3"] = float("nan")
    out["nc4"] = nc4(W, b, H)
    return out


def gram_alignment(Z1, Z2) -> float:
    """Frobenius gap between the normalized row Grams of two logit matrices."""
    Z1 = numlin.as_matrix(Z1, "Z1")
    Z2 = numlin.as_matrix(Z2, "Z2")
    if Z1.shape != Z2.shape:
        raise DimensionError(f"shape mismatch {Z1.shape} vs {Z2.shape}")
    G1, G2 = Z1 @ Z1.T, Z2 @ Z2.T
    n1, n2 = np.linalg.norm(G1), np.linalg.norm(G2)
    if n1 == 0 or n2 == 0:
        raise DegenerateInputError("gram_alignment needs nonzero inputs")
    return float(np.linalg.norm(G1 / n1 - G2 / n2))
