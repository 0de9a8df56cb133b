"""Tracking models and trajectory simulation."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from .model import LinearModel, Model, NonlinearModel

Array = np.ndarray


def _positive(**params):
    for name, val in params.items():
        if not val > 0:
            raise ValueError(f"{name} must be > 0, got {val}")


def white_noise_block(dt: float, q_c: float) -> Array:
    """Discretized continuous white-noise acceleration block for (position, velocity)."""
    return q_c * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])


def linear_tracking_model(dt: float = 0.1, q_c: float = 0.5, sigma: float = 0.2, T: int = 100,
                          m1: Optional[Array] = None, P1: Optional[Array] = None) -> LinearModel:
    """Constant-velocity model in the plane, state ``(p1, p2, v1, v2)``.

    Positions are measured; the sparsity operator picks out the velocities.
    """
    _positive(dt=dt, q_c=q_c, sigma=sigma, T=T)
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    H = np.eye(2, 4)
    Omega = np.eye(2, 4, k=2)
    blk = white_noise_block(dt, q_c)
    Q = np.zeros((4, 4))
    for i in range(2):
        Q[np.ix_([i, i + 2], [i, i + 2])] = blk
    return LinearModel(
        A=A, H=H, Q=Q, R=sigma ** 2 * np.eye(2), Omega=Omega,
        m1=np.zeros(4) if m1 is None else m1,
        P1=np.eye(4) if P1 is None else P1, T=T,
    )


# coordinated turn -----------------------------------------------------------

_SERIES_LIMIT = 1e-3


def _turn_terms(omega: float, dt: float):
    """``sin(w dt)/w``, ``(1-cos(w dt))/w`` and their derivatives in ``w``."""
    wt = omega * dt
    if abs(wt) < _SERIES_LIMIT:
        w2 = omega * omega
        f1 = dt - w2 * dt ** 3 / 6 + w2 * w2 * dt ** 5 / 120
        f2 = omega * dt ** 2 / 2 - omega * w2 * dt ** 4 / 24
        d1 = -omega * dt ** 3 / 3 + omega * w2 * dt ** 5 / 30
        d2 = dt ** 2 / 2 - w2 * dt ** 4 / 8
        return f1, f2, d1, d2
    s, c = np.sin(wt), np.cos(wt)
    f1 = s / omega
    f2 = (1 - c) / omega
    d1 = (dt * c * omega - s) / omega ** 2
    d2 = (dt * s * omega - (1 - c)) / omega ** 2
    return f1, f2, d1, d2


def ct_dynamics(x: Array, dt: float) -> Array:
    p1, p2, v1, v2, om = x
    f1, f2, _, _ = _turn_terms(om, dt)
    s, c = np.sin(om * dt), np.cos(om * dt)
    return np.array([
        p1 + f1 * v1 - f2 * v2,
        p2 + f2 * v1 + f1 * v2,
        c * v1 - s * v2,
        s * v1 + c * v2,
        om,
    ])


def ct_jacobian(x: Array, dt: float) -> Array:
    _, _, v1, v2, om = x
    f1, f2, d1, d2 = _turn_terms(om, dt)
    s, c = np.sin(om * dt), np.cos(om * dt)
    J = np.eye(5)
    J[0, 2], J[0, 3], J[0, 4] = f1, -f2, d1 * v1 - d2 * v2
    J[1, 2], J[1, 3], J[1, 4] = f2, f1, d2 * v1 + d1 * v2
    J[2, 2], J[2, 3], J[2, 4] = c, -s, -dt * (s * v1 + c * v2)
    J[3, 2], J[3, 3], J[3, 4] = s, c, dt * (c * v1 - s * v2)
    return J


def coordinated_turn_model(dt: float = 0.2, q_c: float = 0.01, sigma: float = 0.3, T: int = 100,
                           q_omega: Optional[float] = None, m1: Optional[Array] = None,
                           P1: Optional[Array] = None) -> NonlinearModel:
    """Constant turn-rate model, state ``(p1, p2, v1, v2, omega)``.

    Velocities rotate by ``omega * dt`` per step and the turn rate follows a
    random walk with intensity ``q_omega`` (defaults to ``q_c``). Positions
    are measured; the sparsity operator picks out the velocities.
    """
    _positive(dt=dt, q_c=q_c, sigma=sigma, T=T)
    q_omega = q_c if q_omega is None else q_omega
    _positive(q_omega=q_omega)
    Q = np.zeros((5, 5))
    blk = white_noise_block(dt, q_c)
    for i in range(2):
        Q[np.ix_([i, i + 2], [i, i + 2])] = blk
    Q[4, 4] = q_omega * dt
    H = np.eye(2, 5)
    return NonlinearModel(
        T=T,
        dynamics=lambda x, t: ct_dynamics(x, dt),
        dynamics_jacobian=lambda x, t: ct_jacobian(x, dt),
        measurement=lambda x, t: H @ x,
        measurement_jacobian=lambda x, t: H.copy(),
        Q=Q, R=sigma ** 2 * np.eye(2), Omega=np.eye(2, 5, k=2),
        m1=np.array([0.0, 0.0, 1.0, 0.0, 0.1]) if m1 is None else m1,
        P1=np.diag([0.1, 0.1, 0.1, 0.1, 0.01]) if P1 is None else P1,
    )


# simulation -----------------------------------------------------------------


def with_horizon(model: Model, T: int) -> Model:
    """Same model over a different number of steps (time-invariant parts only)."""
    if T == model.T:
        return model
    if isinstance(model, LinearModel):
        if not model.stationary:
            raise ValueError("cannot change the horizon of a time-varying model")
        return replace(model, T=T)
    if any(np.asarray(getattr(model, k)).ndim == 3 for k in ("Q", "R", "Omega")):
        raise ValueError("cannot change the horizon of a time-varying model")
    return replace(model, T=T)


def simulate(model: Model, T: Optional[int] = None, seed: int = 0) -> tuple[Array, Array]:
    """Draw ``(x, y)`` from the model with seeded Gaussian noise."""
    model = with_horizon(model, model.T if T is None else T)
    rng = np.random.default_rng(seed)
    T, n = model.T, model.n_x
    Q, R = model.steps("Q"), model.steps("R")
    x = np.empty((T, n))
    y = np.empty((T, model.n_y))

    def draw(cov):
        L = np.linalg.cholesky(cov)
        return L @ rng.standard_normal(cov.shape[0])

    x[0] = model.m1 + draw(model.P1)
    linear = isinstance(model, LinearModel)
    if linear:
        A, H = model.steps("A"), model.steps("H")
        b, c = model.offsets("b"), model.offsets("c")
    for t in range(T):
        if t > 0:
            mean = A[t] @ x[t - 1] + b[t] if linear else model.dynamics(x[t - 1], t)
            x[t] = mean + draw(Q[t])
        hx = H[t] @ x[t] + c[t] if linear else model.measurement(x[t], t)
        y[t] = hx + draw(R[t])
    return x, y


def sparse_velocity_trajectory(T: int, dt: float = 0.1, n_segments: int = 4,
                               p_move: float = 0.5, seed: int = 0) -> Array:
    """Planar trajectory whose velocities are piecewise constant and often zero.

    The horizon is cut into ``n_segments`` equal pieces; in each piece every
    velocity component is zero with probability ``1 - p_move`` and standard
    normal otherwise. Positions start from a standard normal draw and
    integrate the velocity.
    """
    rng = np.random.default_rng(seed)
    bounds = np.linspace(0, T, n_segments + 1).round().astype(int)
    v = np.zeros((T, 2))
    for a, b in zip(bounds[:-1], bounds[1:]):
        move = rng.random(2) < p_move
        v[a:b] = np.where(move, rng.standard_normal(2), 0.0)
    x = np.empty((T, 4))
    x[:, 2:] = v
    x[0, :2] = rng.standard_normal(2)
    for t in range(1, T):
        x[t, :2] = x[t - 1, :2] + dt * v[t]
    return x


def tracking_instance(T: int = 100, seed: int = 0, truth: str = "sparse-velocity",
                      dt: float = 0.1, q_c: float = 0.5, sigma: float = 0.2):
    """Tracking model with a ground-truth trajectory and noisy position readings.

    ``truth="model"`` samples the state from the model itself;
    ``truth="sparse-velocity"`` uses :func:`sparse_velocity_trajectory`.
    """
    model = linear_tracking_model(dt=dt, q_c=q_c, sigma=sigma, T=T)
    if truth == "model":
        return (model,) + simulate(model, seed=seed)
    if truth != "sparse-velocity":
        raise ValueError(f"unknown truth generator {truth!r}")
    x = sparse_velocity_trajectory(T, dt=dt, seed=seed)
    rng = np.random.default_rng([seed, 1])
    y = x[:, :2] + sigma * rng.standard_normal((T, 2))
    return model, x, y
