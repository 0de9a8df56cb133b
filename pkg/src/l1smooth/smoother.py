"""Kalman filter, RTS smoother and iterated extended Kalman smoother.

Each time step applies two measurement updates in a fixed order: first
the real measurement ``y_t``, then an optional pseudo-measurement
``Delta_t = Theta_t x_t + noise(Sigma_t)``. Gains and covariances do not
depend on ``y`` or ``Delta``, so they can be computed once
(:func:`precompute_gains`) and reused by every subsequent mean-only pass.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from . import _kernels
from .errors import ModelError, SmootherError, StaleCacheError
from .model import (
    LinearModel,
    Model,
    NonlinearModel,
    PseudoMeasurement,
    augment_pseudo,
    pseudo_penalty,
    smoothing_objective,
)

Array = np.ndarray

# dimension threshold under which the compiled kernels are used by default
NUMBA_MAX_DIM = 16


class _Counter:
    """Process-wide count of covariance recursion steps (for instrumentation)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, k: int) -> None:
        with self._lock:
            self._value += k

    @property
    def value(self) -> int:
        return self._value


covariance_steps = _Counter()


def _sym(P: Array) -> Array:
    return 0.5 * (P + P.T)


# ---------------------------------------------------------------------------
# single-step recursions


@dataclass
class GaussianTrajectory:
    """Per-timestep means ``(T, n)`` and covariances ``(T, n, n)``."""

    means: Array
    covariances: Optional[Array] = None
    predicted_means: Optional[Array] = None
    predicted_covariances: Optional[Array] = None

    @property
    def T(self) -> int:
        return self.means.shape[0]


def kf_predict(m: Array, P: Array, A: Array, Q: Array, b: Optional[Array] = None):
    """Prediction step: ``(A m + b, A P A^T + Q)``."""
    m, P, A, Q = (np.asarray(v, dtype=float) for v in (m, P, A, Q))
    if A.shape != (m.size, m.size) or P.shape != A.shape or Q.shape != A.shape:
        raise ModelError("kf_predict dimension mismatch")
    mp = A @ m if b is None else A @ m + b
    return mp, _sym(A @ P @ A.T + Q)


def _gain(Pm: Array, C: Array, V: Array):
    """Kalman gain, innovation covariance and posterior covariance."""
    CP = C @ Pm
    S = _sym(CP @ C.T + V)
    try:
        cf = sla.cho_factor(S, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SmootherError("singular innovation covariance") from exc
    K = sla.cho_solve(cf, CP, check_finite=False).T
    return K, S, _sym(Pm - K @ CP)


def kf_update(m_pred: Array, P_pred: Array, C: Array, V: Array, d: Array,
              c: Optional[Array] = None):
    """Measurement update for ``d = C x + c + noise(V)``; returns ``(m, P)``."""
    m_pred, P_pred, C, V, d = (np.asarray(v, dtype=float) for v in (m_pred, P_pred, C, V, d))
    if C.shape[1] != m_pred.size or V.shape != (C.shape[0],) * 2 or d.shape != (C.shape[0],):
        raise ModelError("kf_update dimension mismatch")
    K, _, P = _gain(P_pred, C, V)
    innov = d - C @ m_pred if c is None else d - c - C @ m_pred
    return m_pred + K @ innov, P


def rts_backward(filtered: GaussianTrajectory, predicted: GaussianTrajectory,
                 A: Array) -> GaussianTrajectory:
    """RTS backward pass.

    ``predicted`` holds the one-step predictions for every step (entry 0 is
    ignored); ``A`` is (n, n) or (T, n, n) with ``A[t]`` mapping step t-1
    to step t.
    """
    T = filtered.T
    A3 = A if A.ndim == 3 else np.broadcast_to(A, (T,) + A.shape)
    ms = np.array(filtered.means, dtype=float)
    Ps = np.array(filtered.covariances, dtype=float)
    for t in range(T - 2, -1, -1):
        Pp = predicted.covariances[t + 1]
        try:
            cf = sla.cho_factor(Pp, lower=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SmootherError("singular predicted covariance") from exc
        Gt = sla.cho_solve(cf, A3[t + 1] @ filtered.covariances[t]).T
        ms[t] = filtered.means[t] + Gt @ (ms[t + 1] - predicted.means[t + 1])
        Ps[t] = _sym(filtered.covariances[t] + Gt @ (Ps[t + 1] - Pp) @ Gt.T)
    return GaussianTrajectory(ms, Ps)


# ---------------------------------------------------------------------------
# gain cache


@dataclass(frozen=True, eq=False)
class FilterCache:
    """Data-independent gains for one (model, Theta, Sigma) combination.

    ``Ky``, ``Kz`` are the measurement and pseudo-measurement gains,
    ``G`` the smoother gains (``T-1`` entries), ``Sy``, ``Sz`` the innovation
    covariances. Filtered, predicted and smoothed covariances are kept only
    when requested.
    """

    fingerprint: str
    theta: Array
    sigma: Array
    Ky: Array
    Kz: Array
    G: Array
    Sy: Array
    Sz: Array
    backend: str
    filtered_cov: Optional[Array] = None
    predicted_cov: Optional[Array] = None
    smoothed_cov: Optional[Array] = None
    _arrays: dict = field(default_factory=dict, repr=False)

    def matches(self, model: LinearModel, theta: Array, sigma: Array) -> bool:
        if self.fingerprint != model.gain_fingerprint:
            return False
        for mine, other in ((self.theta, theta), (self.sigma, sigma)):
            if mine is not other and (mine.shape != other.shape or not np.array_equal(mine, other)):
                return False
        return True


def _stack3(arr: Array) -> Array:
    arr = np.asarray(arr, dtype=float)
    return np.ascontiguousarray(arr if arr.ndim == 3 else arr[None])


def _pseudo_arrays(model: Model, pseudo: Optional[PseudoMeasurement]):
    n = model.n_x
    if pseudo is None:
        return np.zeros((0, n)), np.zeros((0, 0)), np.zeros((model.T, 0))
    return pseudo.Theta, pseudo.Sigma, pseudo.Delta


def _pick_backend(model: LinearModel, p: int, backend: str) -> str:
    if backend not in ("auto", "numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend != "auto":
        return backend
    return "numba" if max(model.n_x, model.n_y, p) <= NUMBA_MAX_DIM else "numpy"


_STATUS = {1: "singular innovation covariance", 2: "singular innovation covariance",
           3: "singular predicted covariance"}


def precompute_gains(model: LinearModel, theta: Optional[Array] = None,
                     sigma: Optional[Array] = None, backend: str = "auto",
                     keep_covariances: bool = True) -> FilterCache:
    """Run the covariance-only forward and backward passes once."""
    n, T = model.n_x, model.T
    if theta is None:
        theta, sigma = np.zeros((0, n)), np.zeros((0, 0))
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    p = theta.shape[-2]
    kind = _pick_backend(model, p, backend)
    A, Q, H, R = (_stack3(getattr(model, k)) for k in ("A", "Q", "H", "R"))
    Th, Sg = _stack3(theta), _stack3(sigma)
    ny = H.shape[1]
    Ky = np.zeros((T, n, ny))
    Kz = np.zeros((T, n, p))
    Sy = np.zeros((T, ny, ny))
    Sz = np.zeros((T, p, p))
    G = np.zeros((max(T - 1, 0), n, n))
    Pp = np.zeros((T, n, n))
    Pf = np.zeros((T, n, n))
    if kind == "numba":
        status, t_bad = _kernels.covariance_pass(
            T, A, Q, H, R, Th, Sg, np.ascontiguousarray(model.P1), Ky, Kz, Sy, Sz, G, Pp, Pf)
        if status:
            raise SmootherError(f"{_STATUS[status]} at t={t_bad}")
    else:
        _covariance_pass_numpy(T, A, Q, H, R, Th, Sg, model.P1, Ky, Kz, Sy, Sz, G, Pp, Pf)
    covariance_steps.add(T)
    Ps = None
    if keep_covariances:
        Ps = np.zeros_like(Pf)
        if kind == "numba" and T > 0:
            _kernels.smoothed_covariances(Pf, Pp, G, Ps)
        else:
            Ps[-1] = Pf[-1]
            for t in range(T - 2, -1, -1):
                Ps[t] = _sym(Pf[t] + G[t] @ (Ps[t + 1] - Pp[t + 1]) @ G[t].T)
    else:
        Pp = Pf = None
    return FilterCache(
        fingerprint=model.gain_fingerprint, theta=theta, sigma=sigma,
        Ky=Ky, Kz=Kz, G=G, Sy=Sy, Sz=Sz, backend=kind,
        filtered_cov=Pf, predicted_cov=Pp, smoothed_cov=Ps,
    )


def _covariance_pass_numpy(T, A, Q, H, R, Th, Sg, P1, Ky, Kz, Sy, Sz, G, Pp, Pf):
    def at(arr, t):
        return arr[t if arr.shape[0] > 1 else 0]

    p = Th.shape[1]
    P = None
    for t in range(T):
        Pm = np.array(P1, dtype=float) if t == 0 else _sym(at(A, t) @ P @ at(A, t).T + at(Q, t))
        Pp[t] = Pm
        try:
            Ky[t], Sy[t], P = _gain(Pm, at(H, t), at(R, t))
            if p:
                Kz[t], Sz[t], P = _gain(P, at(Th, t), at(Sg, t))
        except SmootherError as exc:
            raise SmootherError(f"{exc} at t={t}") from None
        Pf[t] = P
    for t in range(T - 1):
        try:
            cf = sla.cho_factor(Pp[t + 1], lower=True)
        except (np.linalg.LinAlgError, ValueError):
            raise SmootherError(f"singular predicted covariance at t={t + 1}") from None
        G[t] = sla.cho_solve(cf, at(A, t + 1) @ Pf[t]).T


def _means_pass_numpy(A, b, H, c, y, Th, De, Ky, Kz, G, m1):
    def at(arr, t):
        return arr[t if arr.shape[0] > 1 else 0]

    T, n = y.shape[0], m1.size
    p = Th.shape[1]
    mp = np.empty((T, n))
    mf = np.empty((T, n))
    m = np.array(m1, dtype=float)
    for t in range(T):
        if t > 0:
            m = at(A, t) @ m + b[t]
        mp[t] = m
        m = m + Ky[t] @ (y[t] - c[t] - at(H, t) @ m)
        if p:
            m = m + Kz[t] @ (De[t] - at(Th, t) @ m)
        mf[t] = m
    ms = np.empty_like(mf)
    ms[-1] = mf[-1]
    for t in range(T - 2, -1, -1):
        ms[t] = mf[t] + G[t] @ (ms[t + 1] - mp[t + 1])
    return ms


def _model_arrays(model: LinearModel, cache: FilterCache):
    arrs = cache._arrays.get("model")
    if arrs is None or arrs[0] is not model:
        arrs = (model,
                _stack3(model.A), np.ascontiguousarray(model.offsets("b")),
                _stack3(model.H), np.ascontiguousarray(model.offsets("c")),
                _stack3(cache.theta), np.ascontiguousarray(model.m1))
        cache._arrays["model"] = arrs
    return arrs[1:]


def ks_solve(model: LinearModel, pseudo: Optional[PseudoMeasurement], y: Array,
             cache: Optional[FilterCache] = None, backend: str = "auto"):
    """Smoothed means of the model augmented with `pseudo`; returns ``(x, cache)``.

    The means are the exact minimizer of the quadratic smoothing objective
    plus the pseudo-measurement penalty. Passing a cache built for the
    same model matrices, Theta and Sigma skips all covariance work.
    """
    if not isinstance(model, LinearModel):
        raise ModelError("ks_solve needs a LinearModel; use ieks_solve for nonlinear models")
    theta, sigma, delta = _pseudo_arrays(model, pseudo)
    if pseudo is not None and cache is None:
        augment_pseudo(model, pseudo)
    if cache is None:
        cache = precompute_gains(model, theta, sigma, backend=backend,
                                 keep_covariances=False)
    elif not cache.matches(model, theta, sigma):
        raise StaleCacheError("stale cache: model matrices, Theta or Sigma changed")
    y = np.ascontiguousarray(np.asarray(y, dtype=float).reshape(model.T, -1))
    delta = np.ascontiguousarray(delta, dtype=float)
    if y.shape[1] != model.n_y:
        raise ModelError(f"measurement dimension {y.shape[1]} != {model.n_y}")
    A, b, H, c, Th, m1 = _model_arrays(model, cache)
    if cache.backend == "numba":
        x = np.empty((model.T, model.n_x))
        _kernels.means_pass(A, b, H, c, y, Th, delta, cache.Ky, cache.Kz, cache.G, m1, x)
    else:
        x = _means_pass_numpy(A, b, H, c, y, Th, delta, cache.Ky, cache.Kz, cache.G, m1)
    if not np.all(np.isfinite(x)):
        raise SmootherError("non-finite smoothed means")
    return x, cache


def rts_smooth(model: LinearModel, y: Array, backend: str = "auto") -> GaussianTrajectory:
    """Plain RTS smoother (no pseudo channel) with covariances."""
    cache = precompute_gains(model, backend=backend, keep_covariances=True)
    x, _ = ks_solve(model, None, y, cache=cache)
    return GaussianTrajectory(x, cache.smoothed_cov)


# ---------------------------------------------------------------------------
# iterated extended Kalman smoother


def ieks_linearize(model: NonlinearModel, x_ref: Array) -> LinearModel:
    """Affine model tangent to `model` along `x_ref`.

    Step ``t`` uses ``A_t = J_a(x_ref[t-1])`` with offset
    ``a_t(x_ref[t-1]) - A_t x_ref[t-1]`` and ``H_t = J_h(x_ref[t])`` with
    offset ``h_t(x_ref[t]) - H_t x_ref[t]``.
    """
    if isinstance(model, LinearModel):
        return model
    x_ref = np.asarray(x_ref, dtype=float)
    T, n = model.T, model.n_x
    if x_ref.shape != (T, n):
        raise ModelError(f"x_ref shape {x_ref.shape} != {(T, n)}")
    A = np.empty((T, n, n))
    A[0] = np.eye(n)
    b = np.zeros((T, n))
    H = np.empty((T, model.n_y, n))
    c = np.empty((T, model.n_y))
    for t in range(T):
        H[t] = model.measurement_jacobian(x_ref[t], t)
        if t > 0:
            A[t] = model.dynamics_jacobian(x_ref[t - 1], t)
        if not (np.all(np.isfinite(H[t])) and np.all(np.isfinite(A[t]))):
            raise SmootherError(f"non-finite Jacobian entries in linearization (t={t})")
        c[t] = model.measurement(x_ref[t], t) - H[t] @ x_ref[t]
        if t > 0:
            b[t] = model.dynamics(x_ref[t - 1], t) - A[t] @ x_ref[t - 1]
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
        raise SmootherError("non-finite offsets in linearization")
    return LinearModel(A=A, H=H, Q=model.Q, R=model.R, Omega=model.Omega,
                       m1=model.m1, P1=model.P1, T=T, b=b, c=c)


@dataclass
class IEKSResult:
    x: Array
    iterations: int
    status: str
    step_norms: list
    objectives: list
    iterates: Optional[list] = None

    @property
    def contraction_ratios(self) -> list:
        s = self.step_norms
        return [s[i + 1] / s[i] for i in range(len(s) - 1) if s[i] > 0]


def ieks_solve(model: Model, pseudo: Optional[PseudoMeasurement], y: Array, x0: Array,
               i_max: int = 10, eps: float = 1e-8, keep_iterates: bool = False,
               trace_path=None, backend: str = "auto") -> IEKSResult:
    """Gauss-Newton minimization of the smoothing objective plus pseudo penalty.

    Each iteration linearizes along the current trajectory and runs the
    smoother on the affine model. Stops once the step norm is at most
    `eps` or after `i_max` iterations; three consecutive objective
    increases stop it with status ``"non-decreasing inner loop"``.
    """
    if i_max < 1 or eps <= 0:
        raise ValueError("need i_max >= 1 and eps > 0")
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ModelError("non-finite trajectory")
    y = np.asarray(y, dtype=float).reshape(model.T, -1)

    def objective(z):
        return smoothing_objective(model, z, y) + pseudo_penalty(pseudo, z)

    steps, objs, iterates = [], [], []
    status = "max-iterations"
    prev = objective(x)
    increases = 0
    for i in range(i_max):
        lin = ieks_linearize(model, x)
        x_new, _ = ks_solve(lin, pseudo, y, backend=backend)
        steps.append(float(np.linalg.norm(x_new - x)))
        x = x_new
        cur = objective(x)
        objs.append(cur)
        if keep_iterates:
            iterates.append(x.copy())
        increases = increases + 1 if cur > prev else 0
        prev = cur
        if steps[-1] <= eps:
            status = "converged"
            break
        if increases >= 3:
            status = "non-decreasing inner loop"
            break
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "step_norm"])
            for i, (o, s) in enumerate(zip(objs, steps), start=1):
                w.writerow([i, repr(o), repr(s)])
    return IEKSResult(x, len(steps), status, steps, objs, iterates if keep_iterates else None)
