import numpy as np
import pytest

from _instances import admm_pseudo, random_linear
from l1smooth import BatchSizeError, GaussNewtonError
from l1smooth.batch import (
    augmented_lagrangian,
    batch_objective,
    batch_run,
    batch_x_update,
    gn_gradient,
    gn_step,
    smoothing_cost,
)
from l1smooth.model import LinearModel, NonlinearModel, evaluate_objective, stack_batch
from l1smooth.scenarios import coordinated_turn_model, simulate, tracking_instance
from l1smooth.smoother import ks_solve
from l1smooth.splitting import VARIANTS, SplittingConfig, run


def scalar_toy():
    return LinearModel(A=np.eye(1), H=np.eye(1), Q=np.eye(1), R=np.eye(1), Omega=np.eye(1),
                       m1=np.zeros(1), P1=np.eye(1), T=1)


def test_scalar_toy_x_update_is_zero():
    B = stack_batch(scalar_toy(), np.zeros((1, 1)))
    np.testing.assert_array_equal(batch_x_update(B, np.zeros(1), np.zeros(1), 1.0), [0.0])


def test_x_update_matches_smoother():
    rng = np.random.default_rng(0)
    m, y = random_linear(rng, T=30, n=4)
    rho = 0.6
    w, eta = rng.standard_normal((30, m.n_omega)), rng.standard_normal((30, m.n_omega))
    x_ks, _ = ks_solve(m, admm_pseudo(m, w, eta, rho), y)
    x_b = batch_x_update(stack_batch(m, y), w.ravel(), eta.ravel(), rho)
    assert np.max(np.abs(x_ks.ravel() - x_b)) / np.max(np.abs(x_b)) < 1e-8


def test_dominant_penalty_fits_target():
    rng = np.random.default_rng(1)
    m, y = random_linear(rng, full_rank_omega=True)
    B = stack_batch(m, y)
    target = rng.standard_normal(B.Omega.shape[0])
    rho = 1e12
    x = batch_x_update(B, target, np.zeros_like(target), rho)
    Om = B.Omega.toarray()
    x_ls = np.linalg.lstsq(Om, target, rcond=None)[0]
    np.testing.assert_allclose(Om @ x, Om @ x_ls, atol=1e-4)


def test_singular_normal_matrix_raises():
    nl = NonlinearModel(T=1, dynamics=lambda x, t: x, dynamics_jacobian=lambda x, t: np.eye(2),
                        measurement=lambda x, t: np.zeros(1), measurement_jacobian=lambda x, t: np.zeros((1, 2)),
                        Q=np.eye(2), R=np.eye(1), Omega=np.eye(2), m1=np.zeros(2), P1=np.eye(2))
    B = stack_batch(nl, np.zeros((1, 1)))
    object.__setattr__(B, "Qinv", 0 * B.Qinv)
    with pytest.raises(GaussNewtonError, match="rank-deficient Gauss--Newton system"):
        gn_step(B, np.zeros(2), np.zeros(2), np.zeros(2), 0.0)


def test_gradient_zero_at_minimizer():
    rng = np.random.default_rng(2)
    m, y = random_linear(rng)
    B = stack_batch(m, y)
    P = B.Omega.shape[0]
    w, eta = rng.standard_normal(P), rng.standard_normal(P)
    x = batch_x_update(B, w, eta, 1.5)
    assert np.linalg.norm(gn_gradient(B, x, w, eta, 1.5)) < 1e-8


def test_gradient_without_penalty_is_smoothing_gradient():
    from l1smooth.model import smoothing_gradient

    ct = coordinated_turn_model(T=10)
    _, y = simulate(ct, seed=0)
    B = stack_batch(ct, y)
    x = np.random.default_rng(3).standard_normal((10, 5))
    P = B.Omega.shape[0]
    np.testing.assert_allclose(gn_gradient(B, x.ravel(), np.zeros(P), np.zeros(P), 0.0),
                               smoothing_gradient(ct, x, y).ravel(), rtol=1e-10, atol=1e-10)


def test_gradient_rejects_non_finite():
    B = stack_batch(scalar_toy(), np.zeros((1, 1)))
    with pytest.raises(Exception, match="non-finite"):
        gn_gradient(B, np.array([np.nan]), np.zeros(1), np.zeros(1), 1.0)


def test_gn_step_exact_on_linear_model():
    rng = np.random.default_rng(4)
    m, y = random_linear(rng)
    B = stack_batch(m, y)
    P = B.Omega.shape[0]
    w, eta = rng.standard_normal(P), rng.standard_normal(P)
    x = gn_step(B, rng.standard_normal(m.T * m.n_x), w, eta, 0.9)
    np.testing.assert_allclose(x, batch_x_update(B, w, eta, 0.9), atol=1e-10)


def test_gn_fixed_point():
    ct = coordinated_turn_model(T=15)
    _, y = simulate(ct, seed=1)
    B = stack_batch(ct, y)
    P = B.Omega.shape[0]
    w, eta = np.zeros(P), np.zeros(P)
    x = np.tile(ct.m1, 15)
    for _ in range(50):
        x = gn_step(B, x, w, eta, 1.0)
    np.testing.assert_allclose(gn_step(B, x, w, eta, 1.0), x, atol=1e-10)


def test_augmented_lagrangian_examples():
    rng = np.random.default_rng(5)
    m, y = random_linear(rng)
    B = stack_batch(m, y)
    x = rng.standard_normal(m.T * m.n_x)
    w = B.Omega @ x
    eta = rng.standard_normal(w.size)
    assert augmented_lagrangian(B, x, w, eta, 3.0, 0.4) == pytest.approx(
        evaluate_objective(m, x.reshape(m.T, -1), 0.4, y), rel=1e-12)
    assert augmented_lagrangian(B, x, w, 0 * eta, 3.0, 0.0) == pytest.approx(smoothing_cost(B, x), rel=1e-12)
    w = rng.standard_normal(w.size)
    manual = smoothing_cost(B, x) + 0.4 * sum(abs(v) for v in w)
    for i in range(w.size):
        r = w[i] - (B.Omega @ x)[i]
        manual += eta[i] * r + 1.5 * r * r
    assert augmented_lagrangian(B, x, w, eta, 3.0, 0.4) == pytest.approx(manual, rel=1e-12)
    assert batch_objective(B, x, 0.4) == pytest.approx(evaluate_objective(m, x.reshape(m.T, -1), 0.4, y))


@pytest.mark.parametrize("variant", VARIANTS)
def test_batch_run_matches_smoother_run(variant):
    rng = np.random.default_rng(6)
    m, y = random_linear(rng)
    cfg = SplittingConfig(variant=variant, lam=0.7, rho=1.2, k_max=15, tol_primal=0, tol_dual=0)
    a = run(m, y, cfg)
    b = batch_run(stack_batch(m, y), cfg)
    assert len(a.history) == len(b.history) == 15
    scale = max(1.0, np.max(np.abs(b.x)))
    assert np.max(np.abs(a.x - b.x)) / scale < 1e-8
    for ha, hb in zip(a.history, b.history):
        assert ha["objective"] == pytest.approx(hb["objective"], rel=1e-8)


def test_batch_run_nonlinear_matches_smoother_run():
    ct = coordinated_turn_model(T=20)
    _, y = simulate(ct, seed=2)
    cfg = SplittingConfig(lam=0.3, k_max=5, tol_primal=0, tol_dual=0, eps=1e-12)
    a = run(ct, y, cfg)
    b = batch_run(stack_batch(ct, y), cfg)
    np.testing.assert_allclose(a.x, b.x, rtol=1e-6, atol=1e-6)


def test_batch_size_limit():
    model, _, y = tracking_instance(T=6000, seed=0)
    with pytest.raises(BatchSizeError, match="batch size limit"):
        stack_batch(model, y)


def test_tracking_instance_batch_converges_within_twenty_iterations():
    model, _, y = tracking_instance(T=100, seed=0)
    sol = batch_run(stack_batch(model, y), SplittingConfig(lam=1.0, rho=1.0, adaptive_rho=True, k_max=20))
    assert sol.status == "converged"


def test_adaptive_rho_matches_smoother_run():
    rng = np.random.default_rng(7)
    m, y = random_linear(rng)
    cfg = SplittingConfig(lam=0.7, rho=0.05, adaptive_rho=True, k_max=12, tol_primal=0, tol_dual=0)
    a = run(m, y, cfg)
    b = batch_run(stack_batch(m, y), cfg)
    np.testing.assert_allclose(a.x, b.x, rtol=1e-8, atol=1e-8)
