"""Unconstrained feature model: objective, derivatives and a full-batch trainer.

The objective is

    f(W, H, b) = (1/N) sum_{k,i} L(W h_{k,i} + b, y_k)
                 + lW/2 ||W||_F^2 + lH/2 ||H||_F^2 + lb/2 ||b||^2

with ``W`` (K x d), ``H`` (d x N, class-major columns) and ``b`` (K,).
Below, ``g`` is the data term and ``G = grad g(WH + b1^T)`` is the K x N
matrix of per-sample logit gradients divided by N.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import geometry, losses, numlin
from .exceptions import DimensionError, DivergenceError
from .losses import LossSpec

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "f", "g", "grad_norm", "nc1", "nc2", "nc3", "nc4",
                 "cert_gap", "balance_residual")

DENSE_HESSIAN_LIMIT = 6000


@dataclass(frozen=True)
class Hyper:
    K: int
    d: int
    n: int
    lambda_w: float
    lambda_h: float
    lambda_b: float = 0.0
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be >= 1")
        if not (self.lambda_w > 0 and self.lambda_h > 0):
            raise ValueError("lambda_w and lambda_h must be positive")
        if self.lambda_b < 0:
            raise ValueError("lambda_b must be >= 0")

    @property
    def N(self) -> int:
        return self.n * self.K

    @property
    def labels(self) -> np.ndarray:
        return geometry.class_major_labels(self.n, self.K)

    @property
    def n_params(self) -> int:
        return self.K * self.d + self.d * self.N + self.K


@dataclass
class UfmState:
    W: np.ndarray
    H: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = numlin.as_matrix(self.W, "W")
        self.H = numlin.as_matrix(self.H, "H")
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.b)):
            raise ValueError("b contains NaN or Inf")

    @classmethod
    def zeros(cls, hyper: Hyper) -> "UfmState":
        return cls(np.zeros((hyper.K, hyper.d)), np.zeros((hyper.d, hyper.N)), np.zeros(hyper.K))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.H.ravel(), self.b])

    @classmethod
    def from_flat(cls, x, hyper: Hyper) -> "UfmState":
        K, d, N = hyper.K, hyper.d, hyper.N
        x = np.asarray(x, dtype=np.float64)
        if x.size != hyper.n_params:
            raise DimensionError(f"expected {hyper.n_params} parameters, got {x.size}")
        return cls(x[: K * d].reshape(K, d), x[K * d: K * d + d * N].reshape(d, N), x[K * d + d * N:])

    def __add__(self, other: "UfmState") -> "UfmState":
        return UfmState(self.W + other.W, self.H + other.H, self.b + other.b)

    def __sub__(self, other: "UfmState") -> "UfmState":
        return UfmState(self.W - other.W, self.H - other.H, self.b - other.b)

    def __mul__(self, c: float) -> "UfmState":
        return UfmState(c * self.W, c * self.H, c * self.b)

    __rmul__ = __mul__

    def logits(self) -> np.ndarray:
        return self.W @ self.H + self.b[:, None]


class ObjBreakdown(NamedTuple):
    g: float
    reg_w: float
    reg_h: float
    reg_b: float
    f: float


class Gradient(NamedTuple):
    Gw: np.ndarray
    Gh: np.ndarray
    Gb: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.Gw**2) + np.sum(self.Gh**2) + np.sum(self.Gb**2)))


def check_shapes(state: UfmState, hyper: Hyper):
    K, d, N = hyper.K, hyper.d, hyper.N
    if state.W.shape != (K, d) or state.H.shape != (d, N) or state.b.shape != (K,):
        raise DimensionError(
            f"state shapes W{state.W.shape} H{state.H.shape} b{state.b.shape} do not match "
            f"K={K}, d={d}, N={N}")


def objective(state: UfmState, hyper: Hyper) -> ObjBreakdown:
    check_shapes(state, hyper)
    g = float(np.mean(losses.loss_values(hyper.loss, state.logits(), hyper.labels)))
    reg_w = 0.5 * hyper.lambda_w * float(np.sum(state.W**2))
    reg_h = 0.5 * hyper.lambda_h * float(np.sum(state.H**2))
    reg_b = 0.5 * hyper.lambda_b * float(np.sum(state.b**2))
    return ObjBreakdown(g, reg_w, reg_h, reg_b, g + reg_w + reg_h + reg_b)


def logit_gradient(state: UfmState, hyper: Hyper) -> np.ndarray:
    """``grad g(WH + b1^T)``: per-sample loss gradients scaled by 1/N."""
    check_shapes(state, hyper)
    return losses.loss_grads(hyper.loss, state.logits(), hyper.labels) / hyper.N


def gradient(state: UfmState, hyper: Hyper) -> Gradient:
    G = logit_gradient(state, hyper)
    return Gradient(G @ state.H.T + hyper.lambda_w * state.W,
                    state.W.T @ G + hyper.lambda_h * state.H,
                    G.sum(axis=1) + hyper.lambda_b * state.b)


def _logit_hessians(state, hyper):
    return losses.loss_hessians(hyper.loss, state.logits(), hyper.labels) / hyper.N


def hess_quadratic_form(state: UfmState, hyper: Hyper, delta: UfmState) -> float:
    """Second directional derivative ``d^2/dt^2 f(state + t delta)`` at ``t = 0``."""
    check_shapes(state, hyper)
    check_shapes(delta, hyper)
    G = logit_gradient(state, hyper)
    dZ = state.W @ delta.H + delta.W @ state.H + delta.b[:, None]
    S = _logit_hessians(state, hyper)
    curv = float(np.einsum("in,nij,jn->", dZ, S, dZ))
    return (curv + 2.0 * float(np.sum(G * (delta.W @ delta.H)))
            + hyper.lambda_w * float(np.sum(delta.W**2))
            + hyper.lambda_h * float(np.sum(delta.H**2))
            + hyper.lambda_b * float(np.sum(delta.b**2)))


def hess_vector_product(state: UfmState, hyper: Hyper, delta: UfmState,
                        _cache=None) -> UfmState:
    """Hessian of ``f`` applied to ``delta`` (the gradient of half the quadratic form)."""
    if _cache is None:
        check_shapes(state, hyper)
        check_shapes(delta, hyper)
        G, S = logit_gradient(state, hyper), _logit_hessians(state, hyper)
    else:
        G, S = _cache
    dZ = state.W @ delta.H + delta.W @ state.H + delta.b[:, None]
    M = np.einsum("nij,jn->in", S, dZ)
    return UfmState(M @ state.H.T + G @ delta.H.T + hyper.lambda_w * delta.W,
                    state.W.T @ M + delta.W.T @ G + hyper.lambda_h * delta.H,
                    M.sum(axis=1) + hyper.lambda_b * delta.b)


def dense_hessian(state: UfmState, hyper: Hyper) -> np.ndarray:
    """Full Hessian over the flattened ``(W, H, b)`` vector."""
    check_shapes(state, hyper)
    P = hyper.n_params
    if P > DENSE_HESSIAN_LIMIT:
        raise ValueError(f"dense Hessian of size {P} exceeds the {DENSE_HESSIAN_LIMIT} guard")
    cache = (logit_gradient(state, hyper), _logit_hessians(state, hyper))
    out = np.empty((P, P))
    e = np.zeros(P)
    for j in range(P):
        e[j] = 1.0
        out[:, j] = hess_vector_product(state, hyper, UfmState.from_flat(e, hyper), cache).flat()
        e[j] = 0.0
    return 0.5 * (out + out.T)


def balance_residual(state: UfmState, hyper: Hyper) -> float:
    """Relative violation of ``lW W^T W = lH H H^T``, which holds at critical points."""
    num = np.linalg.norm(hyper.lambda_w * state.W.T @ state.W - hyper.lambda_h * state.H @ state.H.T)
    return float(num / max(1.0, hyper.lambda_w * float(np.sum(state.W**2))))


def group_stationarity_residuals(state: UfmState, hyper: Hyper) -> np.ndarray:
    """``||W^T G_i + lH H_i||_F`` for each sample group ``i`` of K columns."""
    G = logit_gradient(state, hyper)
    R = state.W.T @ G + hyper.lambda_h * state.H
    K = hyper.K
    return np.array([np.linalg.norm(R[:, i * K:(i + 1) * K]) for i in range(hyper.n)])


def bias_isotropy_residual(state: UfmState) -> float:
    return float(np.linalg.norm(state.b - state.b.mean()))


def spectral_gap(state: UfmState, hyper: Hyper) -> float:
    """``||grad g(WH + b1^T)||_2 - sqrt(lW lH)``."""
    G = logit_gradient(state, hyper)
    return numlin.spectral_norm(G) - float(np.sqrt(hyper.lambda_w * hyper.lambda_h))


# training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    hyper: Hyper
    init_sigma: float = 0.1
    lr: float = 2.0
    momentum: float = 0.9
    max_iters: int = 100_000
    log_every: int = 1000
    seed: int = 0
    freeze_w_as_etf: bool = False
    grad_tol: float = 1e-8
    # row norm of the frozen classifier; None picks the optimal scale
    etf_row_norm: float | None = None

    def __post_init__(self):
        if not self.init_sigma >= 0:
            raise ValueError("init_sigma must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_iters < 0 or self.log_every < 1:
            raise ValueError("max_iters must be >= 0 and log_every >= 1")
        if self.freeze_w_as_etf and self.hyper.d < self.hyper.K:
            raise ValueError("freezing W as an ETF needs d >= K")
        if self.etf_row_norm is not None and not self.etf_row_norm > 0:
            raise ValueError("etf_row_norm must be positive")


class TraceRow(NamedTuple):
    iter: int
    f: float
    g: float
    grad_norm: float
    nc1: float
    nc2: float
    nc3: float
    nc4: float
    cert_gap: float
    balance_residual: float


@dataclass
class TrainResult:
    state: UfmState
    trace: list
    converged: bool
    iterations: int


def init_state(config: TrainConfig) -> UfmState:
    hp = config.hyper
    rng = np.random.default_rng(config.seed)
    s = config.init_sigma
    W = s * rng.standard_normal((hp.K, hp.d))
    H = s * rng.standard_normal((hp.d, hp.N))
    b = s * rng.standard_normal(hp.K)
    if config.freeze_w_as_etf:
        W = frozen_classifier(config)
    return UfmState(W, H, b)


def frozen_classifier(config: TrainConfig) -> np.ndarray:
    """Classifier rows on an embedded simplex ETF, used when ``W`` is frozen.

    Row norm is ``config.etf_row_norm``; when unset it is the norm of the
    global minimizer (``sqrt(rho*/K)``), or 1 for MSE where no such family is
    available.
    """
    hp = config.hyper
    r = config.etf_row_norm
    if r is None:
        if hp.loss.kind == "MSE":
            r = 1.0
        else:
            from .certify import rho_oracle

            r = float(np.sqrt(rho_oracle(hp).rho / hp.K))
    M = geometry.embedded_etf(hp.K, hp.d, config.seed)
    # ETF columns have unit norm
    return r * M.T


def _trace_row(it, state, hyper, grad_norm):
    obj = objective(state, hyper)
    nc = geometry.nc_metrics(state.W, state.H, state.b, hyper.n, hyper.K)
    return TraceRow(it, obj.f, obj.g, grad_norm, nc["nc1"], nc["nc2"], nc["nc3"], nc["nc4"],
                    spectral_gap(state, hyper), balance_residual(state, hyper))


def train(config: TrainConfig, init: UfmState | None = None) -> TrainResult:
    """Full-batch gradient descent with heavy-ball momentum.

    Deterministic for a given seed. Stops once the gradient norm (over the
    trainable blocks) drops to ``grad_tol``. ``init`` replaces the seeded
    Gaussian start; a frozen classifier still overrides its ``W``.
    """
    hp = config.hyper
    if init is None:
        state = init_state(config)
    else:
        check_shapes(init, hp)
        W = frozen_classifier(config) if config.freeze_w_as_etf else init.W.copy()
        state = UfmState(W, init.H.copy(), init.b.copy())
    if init is None and config.init_sigma == 0 and not config.freeze_w_as_etf:
        warnings.warn("init_sigma=0 starts at the origin, which is a critical point; "
                      "gradient descent will not move", RuntimeWarning, stacklevel=2)
    frozen = config.freeze_w_as_etf
    vW = np.zeros_like(state.W)
    vH = np.zeros_like(state.H)
    vb = np.zeros_like(state.b)
    lr, mu = config.lr, config.momentum
    trace = []
    converged = False
    it = 0
    while True:
        with np.errstate(over="ignore", invalid="ignore"):
            finite = np.all(np.isfinite(state.logits()))
        if not finite:
            raise DivergenceError(it, float("inf"))
        gr = gradient(state, hp)
        gw = np.zeros_like(gr.Gw) if frozen else gr.Gw
        gnorm = float(np.sqrt(np.sum(gw**2) + np.sum(gr.Gh**2) + np.sum(gr.Gb**2)))
        if not np.isfinite(gnorm):
            raise DivergenceError(it, gnorm)
        converged = gnorm <= config.grad_tol
        last = converged or it >= config.max_iters
        if it % config.log_every == 0 or last:
            row = _trace_row(it, state, hp, gnorm)
            if not np.isfinite(row.f):
                raise DivergenceError(it, row.f)
            trace.append(row)
            logger.debug("iter %d f=%.12g grad=%.3e", it, row.f, gnorm)
        if last:
            break
        vW = mu * vW - lr * gw
        vH = mu * vH - lr * gr.Gh
        vb = mu * vb - lr * gr.Gb
        with np.errstate(over="ignore", invalid="ignore"):
            W, H, b = state.W + vW, state.H + vH, state.b + vb
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(H)) and np.all(np.isfinite(b))):
            raise DivergenceError(it + 1, float("inf"))
        state = UfmState(W, H, b)
        it += 1
    if not converged:
        logger.info("stopped after %d iterations with gradient norm %.3e", it, gnorm)
    return TrainResult(state, trace, converged, it)


# gradient check ------------------------------------------------------------


def grad_check(state: UfmState, hyper: Hyper, eps: float = 1e-5, max_coords: int = 2000,
               n_sample: int = 200, seed: int = 0) -> float:
    """Worst relative error of the analytic gradient against central differences.

    The error of each coordinate is ``|g - fd| / max(1, |g|, |fd|)``, i.e.
    absolute for small entries. Above ``max_coords`` parameters a seeded
    random subsample of ``n_sample`` coordinates is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = state.flat()
    g = gradient(state, hyper)
    ga = np.concatenate([g.Gw.ravel(), g.Gh.ravel(), g.Gb])
    P = x0.size
    if P > max_coords:
        coords = np.random.default_rng(seed).choice(P, size=n_sample, replace=False)
    else:
        coords = np.arange(P)
    worst = 0.0
    x = x0.copy()
    for j in coords:
        x[j] = x0[j] + eps
        fp = objective(UfmState.from_flat(x, hyper), hyper).f
        x[j] = x0[j] - eps
        fm = objective(UfmState.from_flat(x, hyper), hyper).f
        x[j] = x0[j]
        fd = (fp - fm) / (2 * eps)
        err = abs(ga[j] - fd) / max(1.0, abs(ga[j]), abs(fd))
        worst = max(worst, err)
    return worst


def random_state(hyper: Hyper, seed: int, scale: float = 1.0) -> UfmState:
    rng = np.random.default_rng(seed)
    return UfmState(scale * rng.standard_normal((hyper.K, hyper.d)),
                    scale * rng.standard_normal((hyper.d, hyper.N)),
                    scale * rng.standard_normal(hyper.K))


def with_loss(hyper: Hyper, loss: LossSpec) -> Hyper:
    return replace(hyper, loss=loss)
