import math
import warnings

import numpy as np
import pytest

from collapse_lab import ufm
from collapse_lab.certify import construct_global_solution, rho_oracle
from collapse_lab.exceptions import DimensionError, DivergenceError
from collapse_lab.losses import LossSpec
from collapse_lab.ufm import Hyper, TrainConfig, UfmState

from conftest import ALL_KINDS, CONTRASTIVE, small_hyper


def random_delta(hyper, rng):
    return UfmState(rng.normal(size=(hyper.K, hyper.d)), rng.normal(size=(hyper.d, hyper.N)),
                    rng.normal(size=hyper.K))


def fd_curvature(state, hyper, delta, eps=1e-3):
    f = lambda s: ufm.objective(s, hyper).f  # noqa: E731
    return (f(state + eps * delta) + f(state - eps * delta) - 2 * f(state)) / eps**2


def test_hyper_validation():
    with pytest.raises(ValueError):
        Hyper(K=1, d=2, n=1, lambda_w=1, lambda_h=1)
    with pytest.raises(ValueError):
        Hyper(K=2, d=2, n=1, lambda_w=0, lambda_h=1)
    with pytest.raises(ValueError):
        Hyper(K=2, d=2, n=1, lambda_w=1, lambda_h=1, lambda_b=-1)
    hp = Hyper(K=3, d=2, n=2, lambda_w=1, lambda_h=1)
    np.testing.assert_array_equal(hp.labels, [0, 1, 2, 0, 1, 2])
    assert hp.N == 6 and hp.n_params == 6 + 12 + 3


def test_flat_round_trip(rng):
    hp = small_hyper()
    s = ufm.random_state(hp, 3)
    r = UfmState.from_flat(s.flat(), hp)
    np.testing.assert_array_equal(r.W, s.W)
    np.testing.assert_array_equal(r.H, s.H)
    with pytest.raises(DimensionError):
        UfmState.from_flat(np.zeros(3), hp)


def test_shape_mismatch_rejected():
    hp = small_hyper()
    bad = UfmState(np.zeros((hp.K, hp.d + 1)), np.zeros((hp.d, hp.N)), np.zeros(hp.K))
    with pytest.raises(DimensionError):
        ufm.objective(bad, hp)
    with pytest.raises(DimensionError):
        ufm.gradient(bad, hp)


@pytest.mark.parametrize("K", [2, 4, 7])
def test_objective_at_origin_is_log_k(K):
    hp = Hyper(K=K, d=3, n=2, lambda_w=0.1, lambda_h=0.1, lambda_b=0.1)
    ob = ufm.objective(UfmState.zeros(hp), hp)
    assert ob.f == pytest.approx(math.log(K), rel=1e-14)
    assert ob.reg_w == ob.reg_h == ob.reg_b == 0.0


def test_objective_breakdown(rng):
    hp = small_hyper("LS")
    s = ufm.random_state(hp, 1)
    ob = ufm.objective(s, hp)
    assert ob.reg_w == pytest.approx(hp.lambda_w / 2 * np.sum(s.W**2))
    assert ob.reg_h == pytest.approx(hp.lambda_h / 2 * np.sum(s.H**2))
    assert ob.reg_b == pytest.approx(hp.lambda_b / 2 * np.sum(s.b**2))
    assert ob.f == pytest.approx(ob.g + ob.reg_w + ob.reg_h + ob.reg_b, rel=1e-14)


def test_bias_gradient_vanishes_at_origin_for_balanced_labels():
    hp = Hyper(K=4, d=5, n=3, lambda_w=0.1, lambda_h=0.1, lambda_b=0.5)
    g = ufm.gradient(UfmState.zeros(hp), hp)
    np.testing.assert_allclose(g.Gb, 0.0, atol=1e-16)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_grad_check_random_states(kind):
    hp = small_hyper(kind, K=4, d=5, n=3)
    worst = max(ufm.grad_check(ufm.random_state(hp, s), hp) for s in range(10))
    assert worst <= (1e-7 if kind == "MSE" else 1e-6)


def test_grad_check_subsamples_large_models():
    hp = Hyper(K=4, d=30, n=20, lambda_w=0.01, lambda_h=0.01)
    assert hp.n_params > 2000
    assert ufm.grad_check(ufm.random_state(hp, 0, scale=0.3), hp) <= 1e-6
    with pytest.raises(ValueError):
        ufm.grad_check(ufm.random_state(hp, 0), hp, eps=0.0)


def test_gradient_formula_blocks(rng):
    hp = small_hyper("FL")
    s = ufm.random_state(hp, 2)
    G = ufm.logit_gradient(s, hp)
    gr = ufm.gradient(s, hp)
    np.testing.assert_allclose(gr.Gw, G @ s.H.T + hp.lambda_w * s.W)
    np.testing.assert_allclose(gr.Gh, s.W.T @ G + hp.lambda_h * s.H)
    np.testing.assert_allclose(gr.Gb, G.sum(axis=1) + hp.lambda_b * s.b)


# second order ---------------------------------------------------------------


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_quadratic_form_matches_finite_differences(kind, rng):
    hp = small_hyper(kind)
    for seed in range(10):
        s = ufm.random_state(hp, seed, scale=0.7)
        delta = random_delta(hp, rng)
        q = ufm.hess_quadratic_form(s, hp, delta)
        assert q == pytest.approx(fd_curvature(s, hp, delta), rel=1e-4, abs=1e-7)


def test_quadratic_form_zero_direction():
    hp = small_hyper()
    s = ufm.random_state(hp, 0)
    assert ufm.hess_quadratic_form(s, hp, UfmState.zeros(hp)) == 0.0


@pytest.mark.parametrize("kind", CONTRASTIVE)
def test_quadratic_form_parallelogram_law(kind, rng):
    hp = small_hyper(kind)
    s = ufm.random_state(hp, 5)
    for _ in range(5):
        d1, d2 = random_delta(hp, rng), random_delta(hp, rng)
        q = lambda d: ufm.hess_quadratic_form(s, hp, d)  # noqa: E731
        lhs, rhs = q(d1 + d2) + q(d1 - d2), 2 * q(d1) + 2 * q(d2)
        assert lhs == pytest.approx(rhs, rel=1e-9)


def test_hvp_consistent_with_quadratic_form(rng):
    hp = small_hyper("LS")
    s = ufm.random_state(hp, 4)
    d = random_delta(hp, rng)
    assert float(ufm.hess_vector_product(s, hp, d).flat() @ d.flat()) == pytest.approx(
        ufm.hess_quadratic_form(s, hp, d), rel=1e-12)


def test_dense_hessian_polarization_and_symmetry(rng):
    hp = Hyper(K=2, d=2, n=1, lambda_w=0.1, lambda_h=0.2, lambda_b=0.3, loss=LossSpec("FL"))
    s = ufm.random_state(hp, 1)
    Hd = ufm.dense_hessian(s, hp)
    np.testing.assert_allclose(Hd, Hd.T, atol=1e-9)
    P = hp.n_params
    eye = np.eye(P)
    for i, j in [(0, 1), (2, 5), (4, 4), (7, 3)]:
        ei, ej = UfmState.from_flat(eye[i], hp), UfmState.from_flat(eye[j], hp)
        pol = 0.25 * (ufm.hess_quadratic_form(s, hp, ei + ej) - ufm.hess_quadratic_form(s, hp, ei - ej))
        assert Hd[i, j] == pytest.approx(pol, rel=1e-10, abs=1e-14)


def test_dense_hessian_scalar_toy():
    # K=2, d=1, n=1 is the smallest legal model; check one diagonal entry by FD
    hp = Hyper(K=2, d=1, n=1, lambda_w=0.3, lambda_h=0.2, lambda_b=0.1)
    s = ufm.random_state(hp, 7)
    Hd = ufm.dense_hessian(s, hp)
    e = UfmState.from_flat(np.eye(hp.n_params)[0], hp)
    assert Hd[0, 0] == pytest.approx(fd_curvature(s, hp, e, eps=1e-4), rel=1e-5)


def test_dense_hessian_guard():
    hp = Hyper(K=10, d=50, n=20, lambda_w=1, lambda_h=1)
    with pytest.raises(ValueError, match="guard"):
        ufm.dense_hessian(UfmState.zeros(hp), hp)


def test_dense_hessian_spectrum_at_min_and_saddle():
    hp = Hyper(K=3, d=4, n=2, lambda_w=0.01, lambda_h=0.01, lambda_b=0.01)
    opt = construct_global_solution(hp, rho_oracle(hp).rho)
    assert np.linalg.eigvalsh(ufm.dense_hessian(opt, hp))[0] >= -1e-6
    assert np.linalg.eigvalsh(ufm.dense_hessian(UfmState.zeros(hp), hp))[0] < -1e-3


# structural residuals ------------------------------------------------------


def test_balance_residual_examples():
    hp = small_hyper()
    assert ufm.balance_residual(UfmState.zeros(hp), hp) == 0.0
    for rho in (0.1, 1.0, 10.0):
        assert ufm.balance_residual(construct_global_solution(hp, rho), hp) <= 1e-12


def test_spectral_gap_at_origin():
    hp = Hyper(K=4, d=6, n=10, lambda_w=5e-3, lambda_h=5e-3, lambda_b=0.01)
    assert ufm.spectral_gap(UfmState.zeros(hp), hp) == pytest.approx(1 / (4 * math.sqrt(10)) - 5e-3, rel=1e-12)


# training -------------------------------------------------------------------


def quick_config(**kw):
    hp = kw.pop("hyper", Hyper(K=3, d=5, n=2, lambda_w=0.01, lambda_h=0.01, lambda_b=0.01))
    base = dict(hyper=hp, lr=1.0, max_iters=20_000, log_every=500, grad_tol=1e-9)
    base.update(kw)
    return TrainConfig(**base)


def test_train_converges_to_oracle_and_critical_point_properties():
    cfg = quick_config()
    res = ufm.train(cfg)
    assert res.converged
    s, hp = res.state, cfg.hyper
    assert res.trace[-1].grad_norm <= cfg.grad_tol
    assert ufm.objective(s, hp).f == pytest.approx(rho_oracle(hp).f_star, rel=1e-8)
    assert ufm.balance_residual(s, hp) <= 1e-6
    assert np.max(ufm.group_stationarity_residuals(s, hp)) <= 1e-6
    assert ufm.bias_isotropy_residual(s) <= 1e-6


def test_train_trace_layout_and_determinism():
    cfg = quick_config(max_iters=1200, log_every=500, grad_tol=0.0, lr=0.05)
    a, b = ufm.train(cfg), ufm.train(cfg)
    assert [r.iter for r in a.trace] == [0, 500, 1000, 1200]
    assert a.trace == b.trace
    np.testing.assert_array_equal(a.state.H, b.state.H)
    assert ufm.TRACE_COLUMNS == ("iter", "f", "g", "grad_norm", "nc1", "nc2", "nc3", "nc4",
                                 "cert_gap", "balance_residual")


def test_train_different_seeds_differ():
    a = ufm.train(quick_config(max_iters=10))
    b = ufm.train(quick_config(max_iters=10, seed=1))
    assert not np.array_equal(a.state.W, b.state.W)


def test_train_zero_init_warns_and_stalls():
    with pytest.warns(RuntimeWarning, match="origin"):
        res = ufm.train(quick_config(init_sigma=0.0, max_iters=50))
    assert res.converged and res.iterations == 0


def test_train_divergence_names_iteration():
    with pytest.raises(DivergenceError) as info:
        ufm.train(quick_config(lr=1e6, momentum=0.0, max_iters=200))
    assert info.value.iteration >= 1
    assert "iteration" in str(info.value)


def test_train_frozen_classifier_keeps_w():
    hp = Hyper(K=3, d=3, n=2, lambda_w=0.01, lambda_h=0.01, lambda_b=0.01)
    cfg = quick_config(hyper=hp, freeze_w_as_etf=True, max_iters=300)
    res = ufm.train(cfg)
    W0 = ufm.frozen_classifier(cfg)
    np.testing.assert_array_equal(res.state.W, W0)
    rho = rho_oracle(hp).rho
    np.testing.assert_allclose(np.linalg.norm(W0, axis=1), math.sqrt(rho / 3), rtol=1e-12)
    unit = ufm.frozen_classifier(quick_config(hyper=hp, freeze_w_as_etf=True, etf_row_norm=1.0))
    np.testing.assert_allclose(np.linalg.norm(unit, axis=1), 1.0, rtol=1e-12)


def test_train_config_validation():
    hp = small_hyper()
    for bad in (dict(lr=0), dict(momentum=1.0), dict(init_sigma=-1), dict(max_iters=-1),
                dict(log_every=0), dict(etf_row_norm=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(hyper=hp, **bad)
    with pytest.raises(ValueError, match="d >= K"):
        TrainConfig(hyper=Hyper(K=4, d=3, n=1, lambda_w=1, lambda_h=1), freeze_w_as_etf=True)


def test_train_from_explicit_init():
    cfg = quick_config(max_iters=0)
    init = ufm.random_state(cfg.hyper, 99)
    res = ufm.train(cfg, init=init)
    np.testing.assert_array_equal(res.state.H, init.H)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ufm.train(quick_config(max_iters=0, init_sigma=0.0), init=init)
