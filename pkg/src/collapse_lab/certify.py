"""Global-optimality certificates, strict-saddle directions and the ETF solution family.

The certificate test comes from the convex relaxation

    min_{Z, b} g(Z + b1^T) + sqrt(lW lH) ||Z||_* + lb/2 ||b||^2

whose optimality conditions, evaluated at ``Z = WH``, certify a critical
point of the factored problem as a global minimizer whenever
``||grad g(WH + b1^T)||_2 <= sqrt(lW lH)``. Critical points that fail the
test are strict saddles and :func:`negative_curvature_direction` builds an
explicit escape direction in the null space of ``W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry, losses, numlin
from .exceptions import DegenerateInputError, DimensionError, NotStrictSaddleError, NumericalFailure, UnsupportedLossError
from .ufm import Hyper, UfmState, gradient, hess_quadratic_form, logit_gradient

GLOBAL_MIN = "GlobalMin"
STRICT_SADDLE = "StrictSaddle"
NOT_CRITICAL = "NotCritical"

CRIT_TOL = 1e-7
CERT_TOL = 1e-6
RANK_CUT = 1e-10
NULL_TOL = 1e-8


def _feature_scale(hyper: Hyper) -> float:
    return math.sqrt(hyper.lambda_w / (hyper.lambda_h * hyper.n))


def _require_contrastive(hyper: Hyper):
    if hyper.loss.kind == "MSE":
        raise UnsupportedLossError(f"the ETF solution family is only established for CE, FL and LS, not {hyper.loss.kind}")


def construct_global_solution(hyper: Hyper, rho: float, seed: int = 0) -> UfmState:
    """Member of the ETF family with ``||W||_F^2 = rho``.

    Rows of ``W`` are an embedded simplex ETF of common norm ``sqrt(rho/K)``,
    every feature of class ``k`` equals ``sqrt(lW / (lH n)) w^k`` and ``b = 0``.
    """
    _require_contrastive(hyper)
    if rho < 0:
        raise ValueError("rho must be >= 0")
    K, d = hyper.K, hyper.d
    if d < K:
        raise DimensionError(f"construction needs d >= K, got d={d}, K={K}")
    W = math.sqrt(rho / K) * geometry.embedded_etf(K, d, seed).T
    H = np.tile(_feature_scale(hyper) * W.T, (1, hyper.n))
    return UfmState(W, H, np.zeros(K))


def family_logits(hyper: Hyper, rho: float) -> np.ndarray:
    """Logits of a class-0 sample at the family member with parameter ``rho``."""
    K = hyper.K
    s = _feature_scale(hyper) * rho / K
    z = np.full(K, -s / (K - 1))
    z[0] = s
    return z


def family_objective(hyper: Hyper, rho: float) -> float:
    """Closed-form objective along the family: ``L(z(rho)) + lW rho``."""
    return losses.loss_value(hyper.loss, family_logits(hyper, rho), 0) + hyper.lambda_w * rho


def _family_slope(hyper: Hyper, rho: float) -> float:
    K = hyper.K
    dz = np.full(K, -1.0 / (K - 1))
    dz[0] = 1.0
    dz *= _feature_scale(hyper) / K
    return float(losses.loss_grad(hyper.loss, family_logits(hyper, rho), 0) @ dz) + hyper.lambda_w


@dataclass(frozen=True)
class RhoSolution:
    rho: float
    f_star: float
    margin: float


def rho_oracle(hyper: Hyper) -> RhoSolution:
    """Exact minimum of the objective over the ETF family.

    Brackets by doubling from ``rho = 1``, narrows by golden section and
    finishes with bisection on the analytic slope.
    """
    _require_contrastive(hyper)
    f = lambda r: family_objective(hyper, r)  # noqa: E731
    pts = [0.0, 1.0]
    vals = [f(0.0), f(1.0)]
    while vals[-1] < vals[-2]:
        if pts[-1] > 1e300:
            raise NumericalFailure("objective keeps decreasing along the ETF family")
        pts.append(2.0 * pts[-1])
        vals.append(f(pts[-1]))
    lo = pts[-3] if len(pts) >= 3 else 0.0
    hi = pts[-1]
    # the family objective must keep rising past the bracket
    probe_prev = vals[-1]
    for m in (2.0, 4.0, 8.0):
        v = f(m * hi)
        if v < probe_prev:
            raise NumericalFailure(f"objective along the ETF family is not unimodal (rho={m * hi:g})")
        probe_prev = v

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > 1e-10 * (1.0 + a):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    rho = 0.5 * (a + b)
    # golden section only resolves rho to ~sqrt(eps); polish on the slope
    a, b = max(lo, rho - 1e-4 * (1 + rho)), min(hi, rho + 1e-4 * (1 + rho))
    sa, sb = _family_slope(hyper, a), _family_slope(hyper, b)
    if sa >= 0 and a == lo == 0.0:
        rho = 0.0
    elif sa < 0 < sb:
        for _ in range(200):
            mid = 0.5 * (a + b)
            sm = _family_slope(hyper, mid)
            if sm == 0 or b - a <= 2 * np.finfo(float).eps * max(1.0, mid):
                break
            if sm < 0:
                a = mid
            else:
                b = mid
        rho = 0.5 * (a + b)
    return RhoSolution(rho, f(rho), _feature_scale(hyper) * rho / (hyper.K - 1))


@dataclass
class Certificate:
    verdict: str
    grad_norm: float
    spectral_gap: float
    kkt_u_residual: float
    kkt_v_residual: float
    b_residual: float
    crit_tol: float
    cert_tol: float
    min_target_prob: float | None = None
    fl_region_ok: bool | None = None
    nc: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "verdict": self.verdict,
            "grad_norm": self.grad_norm,
            "spectral_gap": self.spectral_gap,
            "kkt_u_residual": self.kkt_u_residual,
            "kkt_v_residual": self.kkt_v_residual,
            "b_residual": self.b_residual,
            "crit_tol": self.crit_tol,
            "cert_tol": self.cert_tol,
            "nc": dict(self.nc),
        }
        if self.fl_region_ok is not None:
            out["fl_region_ok"] = self.fl_region_ok
            out["min_target_prob"] = self.min_target_prob
        return out


def global_certificate(state: UfmState, hyper: Hyper, crit_tol: float = CRIT_TOL,
                       cert_tol: float = CERT_TOL) -> Certificate:
    G = logit_gradient(state, hyper)
    grad_norm = gradient(state, hyper).norm()
    sqrt_l = math.sqrt(hyper.lambda_w * hyper.lambda_h)
    gap = numlin.spectral_norm(G) - sqrt_l

    U, s, V = numlin.svd(state.W @ state.H)
    keep = s > RANK_CUT * s[0] if s.size and s[0] > 0 else np.zeros(s.size, dtype=bool)
    U, V = U[:, keep], V[:, keep]
    kkt_u = float(np.linalg.norm(G @ V + sqrt_l * U))
    kkt_v = float(np.linalg.norm(G.T @ U + sqrt_l * V))
    b_res = float(np.linalg.norm(G.sum(axis=1) + hyper.lambda_b * state.b))

    if grad_norm > crit_tol:
        verdict = NOT_CRITICAL
    elif gap <= cert_tol:
        verdict = GLOBAL_MIN
    else:
        verdict = STRICT_SADDLE

    cert = Certificate(verdict, grad_norm, gap, kkt_u, kkt_v, b_res, crit_tol, cert_tol)
    if hyper.loss.kind == "FL":
        P = losses.softmax(state.logits())
        cert.min_target_prob = float(np.min(P[hyper.labels, np.arange(hyper.N)]))
        cert.fl_region_ok = cert.min_target_prob >= losses.FL_CONVEX_THRESHOLD
    return cert


@dataclass
class CurvatureDirection:
    delta: UfmState
    predicted: float
    measured: float
    null_vector: np.ndarray


def null_vector(W, tol: float = NULL_TOL) -> np.ndarray:
    """Unit vector ``a`` with ``W a ~ 0`` (right singular vector of the smallest singular value)."""
    W = numlin.as_matrix(W, "W")
    K, d = W.shape
    _, s, Vt = np.linalg.svd(W, full_matrices=True)
    s_full = np.zeros(d)
    s_full[: s.size] = s
    if s_full[-1] > tol * max(1.0, s_full[0]):
        raise NotStrictSaddleError(
            f"W ({K}x{d}) has no null vector: smallest singular value {s_full[-1]:.3e}")
    a = Vt[-1]
    nz = np.flatnonzero(np.abs(a) > 1e-12)
    return -a if nz.size and a[nz[0]] < 0 else a


def negative_curvature_direction(state: UfmState, hyper: Hyper, crit_tol: float = CRIT_TOL,
                                 cert_tol: float = CERT_TOL) -> CurvatureDirection:
    """Escape direction at a critical point that fails the certificate.

    With ``a`` a unit null vector of ``W`` and ``(u, v)`` the top singular
    pair of ``grad g``, the direction
    ``((lH/lW)^(1/4) u a^T, -(lH/lW)^(-1/4) a v^T, 0)`` has curvature
    ``-2 ||a||^2 (||grad g|| - sqrt(lW lH))``.
    """
    gnorm = gradient(state, hyper).norm()
    if gnorm > crit_tol:
        raise ValueError(f"state is not near-critical (gradient norm {gnorm:.3e} > {crit_tol:g})")
    G = logit_gradient(state, hyper)
    U, s, V = numlin.svd(G)
    gap = float(s[0]) - math.sqrt(hyper.lambda_w * hyper.lambda_h)
    # a gap within cert_tol of zero is a certified minimum, not a saddle
    if gap <= cert_tol:
        raise NotStrictSaddleError(f"spectral gap {gap:.3e} <= {cert_tol:g}: the certificate holds here")
    a = null_vector(state.W)
    u, v = U[:, 0], V[:, 0]
    ratio = (hyper.lambda_h / hyper.lambda_w) ** 0.25
    delta = UfmState(ratio * np.outer(u, a), -np.outer(a, v) / ratio, np.zeros(hyper.K))
    predicted = -2.0 * float(a @ a) * gap
    return CurvatureDirection(delta, predicted, hess_quadratic_form(state, hyper, delta), a)


@dataclass
class Classification:
    verdict: str
    certificate: Certificate
    direction: CurvatureDirection | None = None
    nc: dict | None = None


def classify_critical_point(state: UfmState, hyper: Hyper, crit_tol: float = CRIT_TOL,
                            cert_tol: float = CERT_TOL) -> Classification:
    cert = global_certificate(state, hyper, crit_tol, cert_tol)
    out = Classification(cert.verdict, cert)
    if cert.verdict == STRICT_SADDLE:
        out.direction = negative_curvature_direction(state, hyper, crit_tol, cert_tol)
    elif cert.verdict == GLOBAL_MIN:
        nc = {}
        for name, fn in (("nc2", lambda: geometry.nc2(state.W)),
                         ("nc3", lambda: geometry.nc3(state.W, state.H, hyper.n, hyper.K))):
            try:
                nc[name] = fn()
            except DegenerateInputError:  # zero solution: metrics undefined
                nc[name] = float("nan")
        out.nc = nc
        cert.nc = dict(nc)
    return out
