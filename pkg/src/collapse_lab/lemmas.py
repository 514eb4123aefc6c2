"""Oracles for the supporting matrix lemmas.

* eigenvalues of a diagonal-plus-rank-one matrix ``D + tau z z^T`` (tau < 0)
  via deflation and the secular equation,
* the two-level singular value structure of ``-(I - 11^T/K) diag(rho)``,
* the variational upper bound on the nuclear norm of a product.

:func:`run_suite` bundles randomized property checks of these (plus the
contrastive bound and logit-Hessian convexity) for the ``lemma`` command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses, numlin
from .exceptions import DimensionError, NumericalFailure

SECULAR_MAX_ITER = 200
TWO_LEVEL_TOL = 1e-10


@dataclass(frozen=True)
class Dpr1Instance:
    d_vec: np.ndarray
    z: np.ndarray
    tau: float

    def __post_init__(self):
        d = np.asarray(self.d_vec, dtype=np.float64).reshape(-1)
        z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if d.shape != z.shape:
            raise DimensionError(f"d_vec and z differ in length: {d.size} vs {z.size}")
        if not self.tau < 0:
            raise ValueError("tau must be negative")
        object.__setattr__(self, "d_vec", d)
        object.__setattr__(self, "z", z)

    def dense(self) -> np.ndarray:
        return np.diag(self.d_vec) + self.tau * np.outer(self.z, self.z)


def householder_to_last(x) -> np.ndarray:
    """Reflector ``P`` (symmetric, orthogonal) with ``P x = ||x|| e_last``."""
    x = np.asarray(x, dtype=np.float64)
    m = x.size
    target = np.zeros(m)
    target[-1] = np.linalg.norm(x)
    v = x - target
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return np.eye(m)
    v /= nv
    return np.eye(m) - 2.0 * np.outer(v, v)


def _secular_roots(d, z, tau, tol):
    """Roots of ``1 + tau sum z_j^2 / (d_j - lam)`` for strictly decreasing ``d``, nonzero ``z``."""
    n = d.size
    z2 = z * z

    def w(lam):
        return 1.0 + tau * np.sum(z2 / (d - lam))

    roots = np.empty(n)
    for i in range(n):
        hi = d[i]
        lo = d[i + 1] if i + 1 < n else d[-1] + tau * np.sum(z2)
        for _ in range(SECULAR_MAX_ITER):
            mid = 0.5 * (lo + hi)
            if mid in (lo, hi) or hi - lo <= tol:
                break
            # w decreases from +inf to -inf across each interval
            if w(mid) > 0:
                lo = mid
            else:
                hi = mid
        roots[i] = 0.5 * (lo + hi)
    return roots


def dpr1_eigenvalues(inst: Dpr1Instance) -> np.ndarray:
    """Eigenvalues of ``diag(d_vec) + tau z z^T`` in descending order.

    Zero entries of ``z`` deflate their diagonal value out; a block of ``m``
    equal diagonal values is rotated by a Householder reflector so that all
    but one of its ``z`` entries vanish, contributing ``m - 1`` copies of
    that value. What remains has distinct diagonals and nonzero ``z``, and
    its eigenvalues are bracketed by the interlacing
    ``d_1 > lam_1 > d_2 > ... > d_n > lam_n`` and found by bisection.
    """
    d, z, tau = inst.d_vec, inst.z, inst.tau
    n = d.size
    if n == 0:
        return np.zeros(0)
    scale = max(float(np.max(np.abs(d))), float(np.dot(z, z)) * abs(tau), 1e-300)
    tol = 1e-14 * scale
    order = np.argsort(-d, kind="stable")
    d, z = d[order], z[order]

    fixed = []
    keep_d, keep_z = [], []
    znorm = float(np.linalg.norm(z))
    i = 0
    while i < n:
        j = i
        while j + 1 < n and d[i] - d[j + 1] <= tol:
            j += 1
        block_d = d[i]
        block_z = z[i:j + 1]
        if j > i:
            zhat = householder_to_last(block_z) @ block_z
            fixed.extend([block_d] * (j - i))
            zval = zhat[-1]
        else:
            zval = block_z[0]
        if abs(zval) <= np.finfo(float).eps * znorm or zval == 0.0:
            fixed.append(block_d)
        else:
            keep_d.append(block_d)
            keep_z.append(zval)
        i = j + 1

    roots = _secular_roots(np.array(keep_d), np.array(keep_z), tau, tol) if keep_d else np.zeros(0)
    return np.sort(np.concatenate([np.array(fixed, dtype=np.float64), roots]))[::-1]


def interlaces(d_vec, lam) -> bool:
    """Strict interlacing ``d_1 > lam_1 > d_2 > ... > d_n > lam_n`` (both sorted descending)."""
    d = np.sort(np.asarray(d_vec, dtype=np.float64))[::-1]
    lam = np.sort(np.asarray(lam, dtype=np.float64))[::-1]
    upper = np.all(d > lam)
    lower = np.all(lam[:-1] > d[1:])
    return bool(upper and lower)


# two-level structure --------------------------------------------------------


@dataclass(frozen=True)
class ZStructure:
    kind: str  # "AllEqual", "OnlyFirstNonzero" or "ViolatesTwoLevel"
    sigma_max: float | None
    singular_values: np.ndarray


def z_matrix(rho_vec) -> np.ndarray:
    rho = np.asarray(rho_vec, dtype=np.float64)
    K = rho.size
    return -(np.eye(K) - np.full((K, K), 1.0 / K)) * rho[None, :]


def z_structure_classify(rho_vec, tol: float = TWO_LEVEL_TOL) -> ZStructure:
    """Classify ``Z = -(I - 11^T/K) diag(rho)`` by its singular values.

    If the nonzero singular values coincide (within ``tol`` relative), either
    all ``|rho_i|`` are equal (``sigma_max = |rho_1|``) or only ``rho_1`` is
    nonzero (``sigma_max = sqrt((K-1)/K) |rho_1|``); otherwise the matrix
    violates the two-level hypothesis.
    """
    rho = np.asarray(rho_vec, dtype=np.float64).reshape(-1)
    K = rho.size
    if K < 3:
        raise ValueError("need K >= 3")
    mags = np.abs(rho)
    if mags[0] == 0:
        raise ValueError("rho_1 must be nonzero")
    if np.any(np.diff(mags) > 0):
        raise ValueError("rho must be sorted by decreasing magnitude")
    s = numlin.svd(z_matrix(rho))[1]
    nonzero = s[s > tol * s[0]]
    if nonzero[0] - nonzero[-1] > tol * s[0]:
        return ZStructure("ViolatesTwoLevel", None, s)
    if np.all(mags - mags[-1] <= 1e-8 * mags[0]):
        return ZStructure("AllEqual", float(s[0]), s)
    if np.all(mags[1:] <= 1e-8 * mags[0]):
        return ZStructure("OnlyFirstNonzero", float(s[0]), s)
    raise NumericalFailure(f"two-level singular values for rho={rho.tolist()} match neither case")


# nuclear norm ---------------------------------------------------------------


def nuclear_variational_gap(W, H, alpha: float) -> float:
    """``(||W||_F^2 + alpha ||H||_F^2) / (2 sqrt(alpha)) - ||W H||_*``, never negative."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    W = numlin.as_matrix(W, "W")
    H = numlin.as_matrix(H, "H")
    if W.shape[1] != H.shape[0]:
        raise DimensionError(f"cannot multiply {W.shape} by {H.shape}")
    bound = (np.sum(W**2) + alpha * np.sum(H**2)) / (2.0 * math.sqrt(alpha))
    return float(bound - numlin.nuclear_norm(W @ H))


def balanced_factors(Z, alpha: float = 1.0):
    """Factors ``W, H`` of ``Z`` attaining the nuclear-norm bound with equality."""
    U, s, V = numlin.svd(Z)
    root = np.sqrt(s)
    return alpha**0.25 * U * root, alpha**-0.25 * (root[:, None] * V.T)


# randomized suites ---------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    tolerance: float
    detail: dict

    def to_dict(self) -> dict:
        return {"suite": self.name, "passed": self.passed, "cases": self.cases,
                "worst_residual": self.worst, "tolerance": self.tolerance, **self.detail}


def random_dpr1(rng, n_max=20) -> Dpr1Instance:
    n = int(rng.integers(1, n_max + 1))
    d = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
    z = rng.normal(size=n)
    mode = rng.integers(0, 4)
    if mode == 1:  # forced zeros in z
        z[rng.random(n) < 0.4] = 0.0
    elif mode == 2:  # forced repeated diagonal values
        reps = rng.integers(0, n, size=n)
        d = d[reps]
    elif mode == 3:
        z[rng.random(n) < 0.3] = 0.0
        d = d[rng.integers(0, n, size=n)]
    return Dpr1Instance(d, z, -float(rng.uniform(0.05, 3.0)))


def suite_dpr1(seed=0, cases=500):
    rng = np.random.default_rng(seed)
    worst, interlace_fail = 0.0, 0
    for _ in range(cases):
        inst = random_dpr1(rng)
        lam = dpr1_eigenvalues(inst)
        ref = np.linalg.eigvalsh(inst.dense())[::-1]
        worst = max(worst, float(np.max(np.abs(lam - ref))))
        d = inst.d_vec
        if np.unique(d).size == d.size and np.all(inst.z != 0) and not interlaces(d, lam):
            interlace_fail += 1
    return SuiteResult("dpr1", bool(worst <= 1e-10 and interlace_fail == 0), cases, worst, 1e-10,
                       {"interlacing_failures": interlace_fail})


def random_rho(rng, K):
    mode = rng.integers(0, 4)
    if mode == 0:
        rho = rng.choice([-1.0, 1.0], size=K) * rng.uniform(0.1, 5.0)
    elif mode == 1:
        rho = np.zeros(K)
        rho[0] = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 5.0)
    elif mode == 2:
        # two-magnitude vectors, the lemma's remaining cases
        i = int(rng.integers(1, K))
        big, small = sorted(rng.uniform(0.1, 5.0, size=2), reverse=True)
        mags = np.array([big] * i + [small * rng.integers(0, 2)] * (K - i))
        rho = mags * rng.choice([-1.0, 1.0], size=K)
    else:
        rho = rng.normal(size=K)
    return rho[np.argsort(-np.abs(rho), kind="stable")]


def brute_force_two_level(rho, tol=TWO_LEVEL_TOL):
    """Independent route: singular values from the eigenvalues of ``Z^T Z``."""
    Z = z_matrix(rho)
    ev = np.clip(np.linalg.eigvalsh(Z.T @ Z), 0.0, None)
    s = np.sqrt(ev)[::-1]
    nz = s[s > 1e-7 * s[0]]
    return bool(nz[0] - nz[-1] <= 1e-7 * s[0]), float(s[0])


def suite_zstructure(seed=0, cases=10_000):
    rng = np.random.default_rng(seed)
    disagree, worst = 0, 0.0
    for _ in range(cases):
        K = int(rng.integers(3, 11))
        rho = random_rho(rng, K)
        res = z_structure_classify(rho)
        two_level, smax = brute_force_two_level(rho)
        if (res.kind != "ViolatesTwoLevel") != two_level:
            disagree += 1
            continue
        if res.kind == "AllEqual":
            worst = max(worst, abs(res.sigma_max - abs(rho[0])))
        elif res.kind == "OnlyFirstNonzero":
            worst = max(worst, abs(res.sigma_max - math.sqrt((K - 1) / K) * abs(rho[0])))
    return SuiteResult("zstructure", bool(disagree == 0 and worst <= 1e-10), cases, worst, 1e-10,
                       {"disagreements": disagree})


def suite_nuclear(seed=0, cases=300):
    rng = np.random.default_rng(seed)
    worst_neg, worst_eq = 0.0, 0.0
    for _ in range(cases):
        K, d, N = (int(v) for v in rng.integers(1, 9, size=3))
        alpha = float(rng.choice([0.1, 1.0, 10.0]))
        W, H = rng.normal(size=(K, d)), rng.normal(size=(d, N))
        worst_neg = max(worst_neg, -nuclear_variational_gap(W, H, alpha))
        Wb, Hb = balanced_factors(W @ H, alpha)
        worst_eq = max(worst_eq, abs(nuclear_variational_gap(Wb, Hb, alpha)))
    worst = max(worst_neg, worst_eq)
    return SuiteResult("nuclear", bool(worst_neg <= 1e-10 and worst_eq <= 1e-9), cases, worst, 1e-10,
                       {"worst_negative_gap": worst_neg, "worst_balanced_gap": worst_eq})


def suite_contrastive(seed=0, cases=10_000):
    rng = np.random.default_rng(seed)
    worst_violation, worst_equality = 0.0, 0.0
    specs = [losses.LossSpec("CE"), losses.LossSpec("FL"), losses.LossSpec("LS")]
    for spec in specs:
        Ks = rng.integers(2, 11, size=cases)
        for K in np.unique(Ks):
            m = int(np.sum(Ks == K))
            Z = rng.normal(size=(K, m)) * rng.choice([0.5, 2.0, 5.0], size=m)
            y = rng.integers(0, K, size=m)
            cols = np.arange(m)
            t = np.sum(Z, axis=0) - K * Z[y, cols]
            lhs = losses.loss_values(spec, Z, y)
            worst_violation = max(worst_violation, float(np.max(losses.contrastive_phi(spec, t, K) - lhs)))
            # equal off-target logits: the bound is attained
            Zeq = np.repeat(rng.normal(size=(1, m)) * 3.0, K, axis=0)
            Zeq[y, cols] = rng.normal(size=m) * 3.0
            teq = np.sum(Zeq, axis=0) - K * Zeq[y, cols]
            gap = losses.loss_values(spec, Zeq, y) - losses.contrastive_phi(spec, teq, K)
            worst_equality = max(worst_equality, float(np.max(np.abs(gap))))
    argmin = argmin_agreement(specs)
    ok = bool(worst_violation <= 1e-12 and worst_equality <= 1e-12 and argmin["ok"])
    return SuiteResult("contrastive", ok, cases * len(specs), max(worst_violation, worst_equality),
                       1e-12, {"worst_violation": worst_violation, "worst_equality_gap": worst_equality,
                               "argmin_max_disagreement": argmin["max_disagreement"],
                               "argmin_max_t": argmin["max_t"]})


def argmin_agreement(specs, Ks=(2, 5, 10), cs=(1e-3, 1e-1, 1.0), tol=1e-8) -> dict:
    """Minimize ``phi(t) + c|t|`` from two unrelated grids; the answers must agree and be <= 0."""
    worst, max_t = 0.0, -np.inf
    for spec in specs:
        for K in Ks:
            for c in cs:
                t1 = losses.regularized_phi_argmin(spec, K, c)
                t2 = losses.regularized_phi_argmin(spec, K, c, lo=-137.0, hi=41.0, n_grid=77_777)
                worst = max(worst, abs(t1 - t2) / max(1.0, abs(t1)))
                max_t = max(max_t, t1, t2)
    return {"ok": bool(worst <= tol and max_t <= 0.0), "max_disagreement": worst, "max_t": float(max_t)}


def suite_hessian_psd(seed=0, cases=1000):
    rng = np.random.default_rng(seed)
    worst = {"CE": 0.0, "LS": 0.0, "FL": 0.0}
    fl_checked = 0
    for kind in worst:
        spec = losses.LossSpec(kind)
        for _ in range(cases):
            K = int(rng.integers(2, 11))
            z = rng.normal(size=K) * rng.choice([0.5, 2.0, 5.0])
            k = int(rng.integers(0, K))
            if kind == "FL":
                # resample until the target probability is in the convex region
                while not losses.fl_convex_region(losses.softmax(z), k):
                    z[k] += 1.0
                fl_checked += 1
            lam_min = float(np.linalg.eigvalsh(losses.loss_hess(spec, z, k))[0])
            worst[kind] = max(worst[kind], -lam_min)
    w = max(worst.values())
    return SuiteResult("hessian-psd", bool(w <= 1e-10), 2 * cases + fl_checked, w, 1e-10,
                       {"worst_negative_eig": worst, "fl_samples_in_region": fl_checked})


SUITES = {
    "dpr1": suite_dpr1,
    "zstructure": suite_zstructure,
    "nuclear": suite_nuclear,
    "contrastive": suite_contrastive,
    "hessian-psd": suite_hessian_psd,
}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    try:
        fn = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown lemma suite {name!r}; choose from {sorted(SUITES)}") from None
    return fn(seed=seed)
