import numpy as np
import pytest

from _instances import admm_pseudo, dense_map, random_linear, spd
from l1smooth import SmootherError, StaleCacheError
from l1smooth.model import LinearModel, NonlinearModel, PseudoMeasurement, as_nonlinear
from l1smooth.scenarios import coordinated_turn_model, linear_tracking_model, simulate
from l1smooth.smoother import (
    GaussianTrajectory,
    covariance_steps,
    ieks_linearize,
    ieks_solve,
    kf_predict,
    kf_update,
    ks_solve,
    precompute_gains,
    rts_backward,
    rts_smooth,
)

BACKENDS = ["numpy", "numba"]


def test_predict_identity_dynamics():
    m, P = np.array([1.0, -2.0]), spd(np.random.default_rng(0), 2)
    mp, Pp = kf_predict(m, P, np.eye(2), np.zeros((2, 2)))
    np.testing.assert_array_equal(mp, m)
    np.testing.assert_allclose(Pp, P, atol=1e-15)


def test_predict_scalar():
    mp, Pp = kf_predict(np.array([1.0]), np.eye(1), 2 * np.eye(1), 0.5 * np.eye(1))
    assert mp[0] == 2.0 and Pp[0, 0] == 4.5


def test_predict_tracking_transition():
    A = linear_tracking_model(dt=0.1).A
    mp, _ = kf_predict(np.array([0.0, 0, 1, 1]), np.eye(4), A, np.eye(4))
    np.testing.assert_allclose(mp, [0.1, 0.1, 1, 1])


def test_update_scalar():
    m, P = kf_update(np.zeros(1), np.eye(1), np.eye(1), np.eye(1), np.array([2.0]))
    assert m[0] == pytest.approx(1.0) and P[0, 0] == pytest.approx(0.5)


def test_update_uninformative_measurement():
    rng = np.random.default_rng(1)
    mp, Pp = rng.standard_normal(3), spd(rng, 3)
    m, P = kf_update(mp, Pp, rng.standard_normal((2, 3)), 1e12 * np.eye(2), rng.standard_normal(2))
    np.testing.assert_allclose(m, mp, rtol=1e-5, atol=1e-10)
    np.testing.assert_allclose(P, Pp, rtol=1e-5)


def test_update_matches_information_form():
    rng = np.random.default_rng(2)
    mp, Pp = rng.standard_normal(4), spd(rng, 4)
    C, V, d = rng.standard_normal((3, 4)), spd(rng, 3), rng.standard_normal(3)
    m, P = kf_update(mp, Pp, C, V, d)
    info = np.linalg.inv(Pp) + C.T @ np.linalg.solve(V, C)
    P_ref = np.linalg.inv(info)
    m_ref = P_ref @ (np.linalg.solve(Pp, mp) + C.T @ np.linalg.solve(V, d))
    np.testing.assert_allclose(m, m_ref, atol=1e-10)
    np.testing.assert_allclose(P, P_ref, atol=1e-10)


def test_update_singular_innovation():
    with pytest.raises(SmootherError, match="singular innovation covariance"):
        kf_update(np.zeros(2), np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), np.zeros(2))


def test_backward_single_step_is_filtered():
    f = GaussianTrajectory(np.ones((1, 2)), np.eye(2)[None])
    s = rts_backward(f, f, np.eye(2))
    np.testing.assert_array_equal(s.means, f.means)


def test_backward_decoupled_dynamics():
    rng = np.random.default_rng(3)
    T = 4
    f = GaussianTrajectory(rng.standard_normal((T, 2)), np.stack([spd(rng, 2) for _ in range(T)]))
    p = GaussianTrajectory(rng.standard_normal((T, 2)), np.stack([spd(rng, 2) for _ in range(T)]))
    s = rts_backward(f, p, np.zeros((2, 2)))
    np.testing.assert_allclose(s.means, f.means)
    np.testing.assert_allclose(s.covariances, f.covariances)


@pytest.mark.parametrize("backend", BACKENDS)
def test_rts_matches_dense_map(backend):
    rng = np.random.default_rng(4)
    m, y = random_linear(rng, T=15)
    traj = rts_smooth(m, y, backend=backend)
    np.testing.assert_allclose(traj.means, dense_map(m, y), atol=1e-9)


def test_two_gaussians_average():
    m = LinearModel(A=np.eye(2), H=np.eye(2), Q=np.eye(2), R=np.eye(2), Omega=np.eye(2),
                    m1=np.array([1.0, 3.0]), P1=np.eye(2), T=1)
    x, _ = ks_solve(m, None, np.array([[3.0, -1.0]]))
    np.testing.assert_allclose(x[0], [2.0, 1.0])


@pytest.mark.parametrize("backend", BACKENDS)
def test_pseudo_channel_matches_closed_form(backend):
    rng = np.random.default_rng(5)
    m, y = random_linear(rng, T=30, n=4)
    rho = 1.7
    w, eta = rng.standard_normal((30, m.n_omega)), rng.standard_normal((30, m.n_omega))
    pseudo = admm_pseudo(m, w, eta, rho)
    x, _ = ks_solve(m, pseudo, y, backend=backend)
    ref = dense_map(m, y, pseudo.Theta, pseudo.Delta, pseudo.Sigma)
    assert np.max(np.abs(x - ref)) / np.max(np.abs(ref)) < 1e-8


def test_huge_pseudo_noise_is_neutral():
    rng = np.random.default_rng(6)
    m, y = random_linear(rng)
    p = m.n_omega
    pseudo = PseudoMeasurement(m.Omega, rng.standard_normal((m.T, p)), 1e12 * np.eye(p))
    np.testing.assert_allclose(ks_solve(m, pseudo, y)[0], ks_solve(m, None, y)[0], atol=1e-5)


def test_solution_zeroes_gradient():
    rng = np.random.default_rng(7)
    for _ in range(10):
        m, y = random_linear(rng)
        rho = float(rng.uniform(0.1, 5))
        w, eta = rng.standard_normal((m.T, m.n_omega)), rng.standard_normal((m.T, m.n_omega))
        pseudo = admm_pseudo(m, w, eta, rho)
        x, _ = ks_solve(m, pseudo, y)
        from l1smooth.batch import gn_gradient
        from l1smooth.model import stack_batch
        g = gn_gradient(stack_batch(m, y), x.ravel(), w.ravel(), eta.ravel(), rho)
        assert np.linalg.norm(g) < 1e-8


def test_backends_agree():
    rng = np.random.default_rng(8)
    for _ in range(10):
        m, y = random_linear(rng)
        pseudo = admm_pseudo(m, rng.standard_normal((m.T, m.n_omega)),
                             rng.standard_normal((m.T, m.n_omega)), 0.8)
        a, ca = ks_solve(m, pseudo, y, backend="numpy")
        b, cb = ks_solve(m, pseudo, y, backend="numba")
        np.testing.assert_allclose(a, b, atol=1e-11)
        np.testing.assert_allclose(ca.G, cb.G, atol=1e-11)


def test_adding_pseudo_channel_never_adds_uncertainty():
    rng = np.random.default_rng(9)
    for _ in range(10):
        m, _ = random_linear(rng)
        plain = precompute_gains(m)
        aug = precompute_gains(m, m.Omega, np.eye(m.n_omega) / rng.uniform(0.1, 10))
        for P0, P1 in zip(plain.filtered_cov, aug.filtered_cov):
            assert np.min(np.linalg.eigvalsh(P0 - P1)) >= -1e-10


def test_cached_and_uncached_means_identical():
    rng = np.random.default_rng(10)
    m, y = random_linear(rng)
    pseudo = admm_pseudo(m, rng.standard_normal((m.T, m.n_omega)), np.zeros((m.T, m.n_omega)), 2.0)
    cache = precompute_gains(m, pseudo.Theta, pseudo.Sigma)
    a, _ = ks_solve(m, pseudo, y)
    b, _ = ks_solve(m, pseudo, y, cache=cache)
    assert np.array_equal(a, b)


def test_cache_reused_across_iterations_without_covariance_work():
    rng = np.random.default_rng(11)
    m, y = random_linear(rng)
    cache = precompute_gains(m, m.Omega, np.eye(m.n_omega) / 2.0)
    before = covariance_steps.value
    for _ in range(20):
        w, eta = rng.standard_normal((m.T, m.n_omega)), rng.standard_normal((m.T, m.n_omega))
        x, _ = ks_solve(m, admm_pseudo(m, w, eta, 2.0), y, cache=cache)
        assert np.all(np.isfinite(x))
    assert covariance_steps.value == before


def test_stale_cache_after_rho_change():
    rng = np.random.default_rng(12)
    m, y = random_linear(rng)
    cache = precompute_gains(m, m.Omega, np.eye(m.n_omega) / 2.0)
    pseudo = admm_pseudo(m, np.zeros((m.T, m.n_omega)), np.zeros((m.T, m.n_omega)), 3.0)
    with pytest.raises(StaleCacheError, match="stale cache"):
        ks_solve(m, pseudo, y, cache=cache)


def test_stale_cache_after_model_change():
    rng = np.random.default_rng(13)
    m, y = random_linear(rng)
    cache = precompute_gains(m)
    other = LinearModel(A=m.A, H=m.H, Q=m.Q, R=2 * np.asarray(m.R), Omega=m.Omega,
                        m1=m.m1, P1=m.P1, T=m.T)
    with pytest.raises(StaleCacheError):
        ks_solve(other, None, y, cache=cache)


def test_linearization_of_linear_model_is_exact():
    rng = np.random.default_rng(14)
    m, _ = random_linear(rng, T=5)
    lin = ieks_linearize(as_nonlinear(m), rng.standard_normal((5, m.n_x)))
    np.testing.assert_allclose(lin.A[1:], m.A[1:])
    np.testing.assert_allclose(lin.H, m.H)
    np.testing.assert_allclose(lin.b, 0, atol=1e-12)
    np.testing.assert_allclose(lin.c, 0, atol=1e-12)


def test_linearization_tangent_line():
    sq = NonlinearModel(T=1, dynamics=lambda x, t: x, dynamics_jacobian=lambda x, t: np.eye(1),
                        measurement=lambda x, t: x ** 2,
                        measurement_jacobian=lambda x, t: np.array([[2 * x[0]]]),
                        Q=np.eye(1), R=np.eye(1), Omega=np.eye(1), m1=np.zeros(1), P1=np.eye(1))
    lin = ieks_linearize(sq, np.array([[3.0]]))
    assert lin.H[0, 0, 0] == 6.0 and lin.c[0, 0] == -9.0
    assert lin.H[0] @ np.array([3.0]) + lin.c[0] == pytest.approx(9.0)


def test_linearization_non_finite_jacobian():
    bad = NonlinearModel(T=1, dynamics=lambda x, t: x, dynamics_jacobian=lambda x, t: np.eye(1),
                         measurement=lambda x, t: x, measurement_jacobian=lambda x, t: np.array([[np.inf]]),
                         Q=np.eye(1), R=np.eye(1), Omega=np.eye(1), m1=np.zeros(1), P1=np.eye(1))
    with pytest.raises(SmootherError):
        ieks_linearize(bad, np.zeros((1, 1)))


def test_linearized_objective_tangent_to_nonlinear():
    from l1smooth.model import smoothing_gradient, smoothing_objective

    rng = np.random.default_rng(15)
    ct = coordinated_turn_model(T=12)
    _, y = simulate(ct, seed=3)
    for _ in range(5):
        x_ref = rng.standard_normal((12, 5)) * 0.5
        lin = ieks_linearize(ct, x_ref)
        assert smoothing_objective(lin, x_ref, y) == pytest.approx(smoothing_objective(ct, x_ref, y), rel=1e-8)
        np.testing.assert_allclose(smoothing_gradient(lin, x_ref, y), smoothing_gradient(ct, x_ref, y),
                                   rtol=1e-8, atol=1e-8)


def test_ieks_on_linear_model_reaches_smoother_in_one_step():
    rng = np.random.default_rng(16)
    m, y = random_linear(rng)
    res = ieks_solve(as_nonlinear(m), None, y, np.zeros((m.T, m.n_x)), keep_iterates=True)
    ref, _ = ks_solve(m, None, y)
    np.testing.assert_allclose(res.iterates[0], ref, atol=1e-10)
    assert res.status == "converged" and res.iterations == 2
    assert res.step_norms[1] <= 1e-8


def test_ieks_at_fixed_point_returns_after_one_iteration():
    ct = coordinated_turn_model(T=20)
    _, y = simulate(ct, seed=4)
    x0 = np.tile(ct.m1, (20, 1))
    res = ieks_solve(ct, None, y, x0, i_max=50, eps=1e-10)
    again = ieks_solve(ct, None, y, res.x, eps=1e-8)
    assert again.iterations == 1 and again.step_norms[0] <= 1e-8


def test_ieks_trace_csv(tmp_path):
    ct = coordinated_turn_model(T=10)
    _, y = simulate(ct, seed=5)
    path = tmp_path / "trace.csv"
    res = ieks_solve(ct, None, y, np.tile(ct.m1, (10, 1)), trace_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,objective,step_norm"
    assert len(lines) == res.iterations + 1


def test_ieks_rejects_non_finite_start():
    ct = coordinated_turn_model(T=3)
    with pytest.raises(Exception, match="non-finite"):
        ieks_solve(ct, None, np.zeros((3, 2)), np.full((3, 5), np.nan))
