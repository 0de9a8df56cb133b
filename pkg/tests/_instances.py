"""Random problem generators shared by the tests."""

import numpy as np
import scipy.sparse as sp

from l1smooth.model import LinearModel, PseudoMeasurement, stack_batch


def spd(rng, n, floor=0.5):
    M = rng.standard_normal((n, n))
    return M @ M.T / n + floor * np.eye(n)


def random_linear(rng, T=None, n=None, ny=None, p=None, time_varying=True, full_rank_omega=False):
    T = T or int(rng.integers(2, 31))
    n = n or int(rng.integers(1, 7))
    ny = ny or int(rng.integers(1, n + 2))
    if p is None:
        p = int(rng.integers(n, n + 3)) if full_rank_omega else int(rng.integers(1, n + 2))

    def mats(fn):
        return np.stack([fn() for _ in range(T)]) if time_varying else fn()

    A = mats(lambda: 0.9 * np.linalg.qr(rng.standard_normal((n, n)))[0] + 0.05 * rng.standard_normal((n, n)))
    H = mats(lambda: rng.standard_normal((ny, n)))
    Q = mats(lambda: spd(rng, n))
    R = mats(lambda: spd(rng, ny))
    if full_rank_omega:
        Om = rng.standard_normal((p, n)) + np.eye(p, n) * 2
    else:
        Om = rng.standard_normal((p, n))
    model = LinearModel(A=A, H=H, Q=Q, R=R, Omega=Om, m1=rng.standard_normal(n),
                        P1=spd(rng, n), T=T)
    y = rng.standard_normal((T, ny))
    return model, y


def admm_pseudo(model, w, eta, rho):
    p = model.n_omega
    return PseudoMeasurement(model.Omega, w + eta / rho, np.eye(p) / rho)


def dense_map(model, y, theta=None, delta=None, sigma=None):
    """Minimizer of the stacked quadratic via a dense solve (oracle)."""
    B = stack_batch(model, y)
    H, Ri, Psi, Qi = (M.toarray() for M in (B.H, B.Rinv, B.Psi, B.Qinv))
    N = H.T @ Ri @ H + Psi.T @ Qi @ Psi
    r = H.T @ Ri @ B.y + Psi.T @ Qi @ B.m
    if theta is not None:
        Th = sp.block_diag([theta] * model.T).toarray() if np.ndim(theta) == 2 else sp.block_diag(list(theta)).toarray()
        Si = np.linalg.inv(sigma)
        W = np.kron(np.eye(model.T), Si)
        N = N + Th.T @ W @ Th
        r = r + Th.T @ W @ np.ravel(delta)
    return np.linalg.solve(N, r).reshape(model.T, model.n_x)


def dense_optimum(model, y, lam):
    """Regularized optimum via cvxpy (independent solver)."""
    import cvxpy as cp

    B = stack_batch(model, y)
    H, Psi, Om = B.H.toarray(), B.Psi.toarray(), B.Omega.toarray()
    LR = np.linalg.cholesky(B.Rinv.toarray())
    LQ = np.linalg.cholesky(B.Qinv.toarray())
    x = cp.Variable(model.T * model.n_x)
    obj = 0.5 * cp.sum_squares(LR.T @ (B.y - H @ x)) + 0.5 * cp.sum_squares(LQ.T @ (Psi @ x - B.m))
    obj = obj + lam * cp.norm1(Om @ x)
    prob = cp.Problem(cp.Minimize(obj))
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return prob.value, x.value.reshape(model.T, model.n_x)
