"""Classification losses on logit vectors: value, gradient, Hessian, and the
contrastive lower-bound function.

Every routine has a batched form operating on a ``K x N`` logit matrix with an
integer label per column (``*_batch``) and a single-sample form taking a
length-``K`` vector and a target index. The batched forms are what the
unconstrained feature model uses; the single-sample forms exist for testing
and for the lemma oracles.

Numerics: all softmax quantities are derived from
``a = logsumexp_{j != k}(z_j - z_k)`` so that ``log p_k = -softplus(a)`` and
``1 - p_k = sigmoid(a)`` stay accurate when ``p_k`` is close to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import UnsupportedLossError

KINDS = ("CE", "FL", "LS", "MSE")

# Lower edge of the region where the focal-loss logit Hessian is PSD.
FL_CONVEX_THRESHOLD = 0.21


@dataclass(frozen=True)
class LossSpec:
    """Loss family plus its parameters.

    Only the parameters of ``kind`` are used; the others are carried along
    so a spec can be round-tripped through a config file unchanged.
    """

    kind: str = "CE"
    gamma: float = 3.0
    alpha: float = 0.1
    kappa: float = 1.0
    beta: float = 15.0

    def __post_init__(self):
        kind = str(self.kind).upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if not (self.kappa > 0 and self.beta > 0):
            raise ValueError("kappa and beta must be positive")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "FL":
            out["gamma"] = self.gamma
        elif self.kind == "LS":
            out["alpha"] = self.alpha
        elif self.kind == "MSE":
            out.update(kappa=self.kappa, beta=self.beta)
        return out


def softmax(z) -> np.ndarray:
    """Softmax along axis 0 (works for a vector or a ``K x N`` matrix)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=0, keepdims=True))
    return e / np.sum(e, axis=0, keepdims=True)


def _check_batch(Z, y):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"logits must be K x N, got shape {Z.shape}")
    y = np.asarray(y, dtype=np.intp)
    K, N = Z.shape
    if y.shape != (N,):
        raise ValueError(f"need one label per column: {y.shape} vs N={N}")
    if N and (y.min() < 0 or y.max() >= K):
        raise ValueError("labels out of range")
    if not np.all(np.isfinite(Z)):
        raise ValueError("logits must be finite")
    return Z, y


class _Target(NamedTuple):
    p: np.ndarray  # K x N softmax
    a: np.ndarray  # logsumexp over off-target of (z_j - z_k)
    logp_k: np.ndarray
    q: np.ndarray  # 1 - p_k
    onehot: np.ndarray


def _target_terms(Z, y) -> _Target:
    K, N = Z.shape
    cols = np.arange(N)
    diff = Z - Z[y, cols]
    diff[y, cols] = -np.inf
    if K > 1:
        a = logsumexp(diff, axis=0)
    else:
        a = np.full(N, -np.inf)
    logp_k = -np.logaddexp(0.0, a)
    q = expit(a)
    onehot = np.zeros_like(Z)
    onehot[y, cols] = 1.0
    return _Target(softmax(Z), a, logp_k, q, onehot)


def smoothed_targets(K: int, y, alpha: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    T = np.full((K, y.size), alpha / K)
    T[y, np.arange(y.size)] = 1.0 - (K - 1) * alpha / K
    return T


def _fl_eta(gamma, q, logp_k):
    """eta(p) = gamma p (1-p)^(gamma-1) log p - (1-p)^gamma and its derivative.

    Written with ``r = -log(p) / (1 - p)`` (which tends to 1 as p -> 1) so
    no power of ``1 - p`` with a negative exponent is formed on its own.
    """
    p = 1.0 - q
    if gamma == 0:
        return -np.ones_like(q), np.zeros_like(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(q > 0, -logp_k / np.where(q > 0, q, 1.0), 1.0)
        qg = q**gamma
        eta = -qg * (1.0 + gamma * p * r)
        # eta' = gamma (1-p)^(gamma-2) ((1 - gamma p) log p + 2 (1 - p))
        #      = gamma (1-p)^(gamma-1) (2 - (1 - gamma p) r)
        qg1 = np.where(q > 0, q ** (gamma - 1.0), 0.0)
        deta = gamma * qg1 * (2.0 - (1.0 - gamma * p) * r)
    eta = np.where(q > 0, eta, 0.0)
    deta = np.where(q > 0, deta, 0.0)
    return eta, deta


def loss_values(spec: LossSpec, Z, y) -> np.ndarray:
    """Per-sample losses for logits ``Z`` (K x N) and labels ``y`` (N,)."""
    Z, y = _check_batch(Z, y)
    K, N = Z.shape
    if spec.kind == "MSE":
        target = np.zeros_like(Z)
        target[y, np.arange(N)] = spec.beta
        weights = np.ones_like(Z)
        weights[y, np.arange(N)] = spec.kappa
        return np.sum(weights * (Z - target) ** 2, axis=0)
    t = _target_terms(Z, y)
    ce = -t.logp_k
    if spec.kind == "CE":
        return ce
    if spec.kind == "FL":
        return t.q**spec.gamma * ce
    # LS: logsumexp(z) - sum_l y_l z_l, written relative to z_k
    T = smoothed_targets(K, y, spec.alpha)
    return ce - np.sum(T * (Z - Z[y, np.arange(N)]), axis=0)


def loss_grads(spec: LossSpec, Z, y) -> np.ndarray:
    """Per-sample logit gradients stacked as columns of a K x N matrix."""
    Z, y = _check_batch(Z, y)
    K, N = Z.shape
    cols = np.arange(N)
    if spec.kind == "MSE":
        G = 2.0 * Z
        G[y, cols] = 2.0 * spec.kappa * (Z[y, cols] - spec.beta)
        return G
    t = _target_terms(Z, y)
    if spec.kind == "CE":
        return t.p - t.onehot
    if spec.kind == "LS":
        return t.p - smoothed_targets(K, y, spec.alpha)
    eta, _ = _fl_eta(spec.gamma, t.q, t.logp_k)
    e_minus_p = t.onehot - t.p
    e_minus_p[y, cols] = t.q
    return eta * e_minus_p


def loss_hessians(spec: LossSpec, Z, y) -> np.ndarray:
    """Per-sample logit Hessians, shape ``(N, K, K)``."""
    Z, y = _check_batch(Z, y)
    K, N = Z.shape
    cols = np.arange(N)
    if spec.kind == "MSE":
        Hs = np.zeros((N, K, K))
        idx = np.arange(K)
        Hs[:, idx, idx] = 2.0
        Hs[cols, y, y] = 2.0 * spec.kappa
        return Hs
    t = _target_terms(Z, y)
    P = t.p.T  # N x K
    base = np.einsum("ni,ij->nij", P, np.eye(K)) - P[:, :, None] * P[:, None, :]
    if spec.kind in ("CE", "LS"):
        return base
    eta, deta = _fl_eta(spec.gamma, t.q, t.logp_k)
    e_minus_p = t.onehot - t.p
    e_minus_p[y, cols] = t.q
    v = e_minus_p.T
    coef = deta * (1.0 - t.q)
    return coef[:, None, None] * v[:, :, None] * v[:, None, :] - eta[:, None, None] * base


# single-sample forms -------------------------------------------------------


def _one(z, k):
    z = np.asarray(z, dtype=np.float64).reshape(-1, 1)
    return z, np.array([int(k)])


def loss_value(spec: LossSpec, z, k: int) -> float:
    return float(loss_values(spec, *_one(z, k))[0])


def loss_grad(spec: LossSpec, z, k: int) -> np.ndarray:
    return loss_grads(spec, *_one(z, k))[:, 0]


def loss_hess(spec: LossSpec, z, k: int) -> np.ndarray:
    return loss_hessians(spec, *_one(z, k))[0]


def fl_convex_region(p, k: int) -> bool:
    """True when the focal loss is known to be locally convex at ``p``."""
    return bool(np.asarray(p, dtype=np.float64)[k] >= FL_CONVEX_THRESHOLD)


# contrastive property -------------------------------------------------------


def _require_contrastive(spec: LossSpec):
    if spec.kind == "MSE":
        raise UnsupportedLossError("MSE has no contrastive lower bound")


def _phi_logits(t, K):
    z = np.zeros((K, np.size(t)))
    z[1:, :] = np.asarray(t, dtype=np.float64) / (K - 1)
    return z


def contrastive_phi(spec: LossSpec, t, K: int):
    """Lower-bound function of the contrastive property.

    Evaluated constructively as the loss at ``z_k = 0`` and every other logit
    equal to ``t / (K - 1)``; for CE this is
    ``log(1 + (K - 1) exp(t / (K - 1)))``. Accepts scalar or array ``t``.
    """
    _require_contrastive(spec)
    if K < 2:
        raise ValueError("K must be >= 2")
    scalar = np.ndim(t) == 0
    Z = _phi_logits(t, K)
    vals = loss_values(spec, Z, np.zeros(Z.shape[1], dtype=np.intp))
    return float(vals[0]) if scalar else vals


def contrastive_phi_deriv(spec: LossSpec, t, K: int):
    """d phi / d t, from the analytic logit gradient."""
    _require_contrastive(spec)
    scalar = np.ndim(t) == 0
    Z = _phi_logits(t, K)
    G = loss_grads(spec, Z, np.zeros(Z.shape[1], dtype=np.intp))
    d = np.sum(G[1:, :], axis=0) / (K - 1)
    return float(d[0]) if scalar else d


@dataclass(frozen=True)
class ContrastiveCheck:
    lhs: float
    rhs: float
    holds: bool
    equality: bool


def check_contrastive_bound(spec: LossSpec, z, k: int, tol: float = 1e-12) -> ContrastiveCheck:
    z = np.asarray(z, dtype=np.float64)
    K = z.size
    _require_contrastive(spec)
    off = np.delete(z, k)
    t = float(np.sum(off - z[k]))
    lhs = loss_value(spec, z, k)
    rhs = contrastive_phi(spec, t, K)
    equal_off = bool(np.ptp(off) <= tol) if off.size else True
    return ContrastiveCheck(lhs, rhs, lhs >= rhs - tol, abs(lhs - rhs) <= tol and equal_off)


def _golden(f, lo, hi, tol):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def regularized_phi_argmin(spec: LossSpec, K: int, c: float, lo: float = -50.0,
                           hi: float = 10.0, n_grid: int = 100_000) -> float:
    """Minimizer of ``phi(t) + c |t|`` over the real line.

    Dense grid on ``[lo, hi]`` (widened while the best point sits on the
    edge), golden-section refinement on the surrounding cell, then a root
    polish of the one-sided derivative so the answer is accurate to rounding
    rather than to the square root of it.
    """
    if c <= 0:
        raise ValueError("c must be positive")

    def obj(t):
        return contrastive_phi(spec, t, K) + c * np.abs(t)

    for _ in range(60):
        grid = np.linspace(lo, hi, n_grid)
        vals = obj(grid)
        i = int(np.argmin(vals))
        if i == 0:
            lo, hi = lo - 2.0 * (hi - lo), hi
        elif i == n_grid - 1:
            lo, hi = lo, hi + 2.0 * (hi - lo)
        else:
            break
    else:
        raise ArithmeticError("regularized phi has no finite minimizer in range")
    a, b = grid[i - 1], grid[i + 1]
    t = _golden(lambda s: float(obj(s)), a, b, 1e-12 * (1.0 + abs(a) + abs(b)))
    # the kink at zero is a legitimate minimizer
    if a <= 0.0 <= b:
        left = contrastive_phi_deriv(spec, 0.0, K) - c
        right = contrastive_phi_deriv(spec, 0.0, K) + c
        if left <= 0.0 <= right:
            return 0.0
    sgn = 1.0 if t > 0 else -1.0

    def dobj(s):
        return contrastive_phi_deriv(spec, s, K) + sgn * c

    a2, b2 = (a, min(b, 0.0)) if sgn < 0 else (max(a, 0.0), b)
    fa, fb = dobj(a2), dobj(b2)
    if fa < 0 < fb:
        for _ in range(200):
            mid = 0.5 * (a2 + b2)
            fm = dobj(mid)
            if fm == 0 or b2 - a2 <= 4 * np.finfo(float).eps * max(1.0, abs(mid)):
                break
            if fm < 0:
                a2 = mid
            else:
                b2 = mid
        t = 0.5 * (a2 + b2)
    return float(t)
