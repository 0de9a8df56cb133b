"""State-space models, the regularized objective, and batch stacking.

Time indices are 0-based throughout: ``x[0]`` is the first state, and the
dynamics callable for step ``t`` maps ``x[t-1]`` to ``x[t]``. Per-timestep
matrices may be given as a single 2-D array (time-invariant) or as a 3-D
array with a leading time axis of length ``T``. For the dynamics, entry 0
of a 3-D array is never used because the prior ``(m1, P1)`` takes its place.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import BatchSizeError, ModelError

Array = np.ndarray
StateFn = Callable[[Array, int], Array]

DEFAULT_MAX_BATCH_DIM = 20000


def _matrices(arr, T: int) -> Array:
    arr = np.asarray(arr, dtype=float)
    return arr if arr.ndim == 3 else np.broadcast_to(arr, (T,) + arr.shape)


def _as_float(arr) -> Optional[Array]:
    if arr is None:
        return None
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


def _digest(*arrays) -> str:
    h = hashlib.sha1()
    for a in arrays:
        if a is None:
            h.update(b"none")
            continue
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def is_positive_definite(M: Array) -> bool:
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(np.isfinite(M)))


def _mahalanobis_sq(M: Array, r: Array) -> float:
    """Sum over t of r_t^T M_t^{-1} r_t for M of shape (k, k) or (T, k, k)."""
    if r.size == 0:
        return 0.0
    if M.ndim == 2:
        cf = sla.cho_factor(M, lower=True, check_finite=False)
        return float(np.sum(r.T * sla.cho_solve(cf, r.T, check_finite=False)))
    sol = np.linalg.solve(M, r[..., None])[..., 0]
    return float(np.sum(r * sol))


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Linear (possibly affine) Gaussian state-space model.

    ``x[t] = A[t] x[t-1] + b[t] + q``, ``y[t] = H[t] x[t] + c[t] + r``. The
    offsets ``b`` and ``c`` are zero unless given; they appear when a
    nonlinear model is linearized.
    """

    A: Array
    H: Array
    Q: Array
    R: Array
    Omega: Array
    m1: Array
    P1: Array
    T: int
    b: Optional[Array] = None
    c: Optional[Array] = None

    def __post_init__(self):
        for name in ("A", "H", "Q", "R", "Omega", "m1", "P1", "b", "c"):
            object.__setattr__(self, name, _as_float(getattr(self, name)))
        object.__setattr__(self, "T", int(self.T))

    @property
    def n_x(self) -> int:
        return self.m1.shape[0]

    @property
    def n_y(self) -> int:
        return self.H.shape[-2]

    @property
    def n_omega(self) -> int:
        return self.Omega.shape[-2]

    @property
    def stationary(self) -> bool:
        mats = (self.A, self.H, self.Q, self.R, self.Omega)
        return all(m.ndim == 2 for m in mats) and self.b is None and self.c is None

    def steps(self, name: str) -> Array:
        """Per-timestep view of matrix field `name`, shape (T, rows, cols)."""
        return _matrices(getattr(self, name), self.T)

    def offsets(self, name: str) -> Array:
        """Offsets ``b`` or ``c`` as a (T, k) array of zeros when absent."""
        val = getattr(self, name)
        if val is not None:
            return val
        k = self.n_x if name == "b" else self.n_y
        return np.zeros((self.T, k))

    @cached_property
    def gain_fingerprint(self) -> str:
        # gains depend on A, H, Q, R, P1 only
        return _digest(self.A, self.H, self.Q, self.R, self.P1)


@dataclass(frozen=True, eq=False)
class NonlinearModel:
    """Nonlinear Gaussian state-space model with user-supplied Jacobians.

    Callables take ``(x, t)``; ``dynamics(x, t)`` returns the mean of
    ``x[t]`` given ``x[t-1] = x`` and is only called for ``t >= 1``.
    """

    T: int
    dynamics: StateFn
    dynamics_jacobian: StateFn
    measurement: StateFn
    measurement_jacobian: StateFn
    Q: Array
    R: Array
    Omega: Array
    m1: Array
    P1: Array

    def __post_init__(self):
        for name in ("Q", "R", "Omega", "m1", "P1"):
            object.__setattr__(self, name, _as_float(getattr(self, name)))
        object.__setattr__(self, "T", int(self.T))

    @property
    def n_x(self) -> int:
        return self.m1.shape[0]

    @property
    def n_y(self) -> int:
        return self.R.shape[-1]

    @property
    def n_omega(self) -> int:
        return self.Omega.shape[-2]

    @property
    def stationary(self) -> bool:
        return False

    def steps(self, name: str) -> Array:
        return _matrices(getattr(self, name), self.T)


Model = Union[LinearModel, NonlinearModel]


def as_nonlinear(model: LinearModel) -> NonlinearModel:
    """Wrap a linear model in the callable interface."""
    A, H = model.steps("A"), model.steps("H")
    b, c = model.offsets("b"), model.offsets("c")
    return NonlinearModel(
        T=model.T,
        dynamics=lambda x, t: A[t] @ x + b[t],
        dynamics_jacobian=lambda x, t: np.array(A[t]),
        measurement=lambda x, t: H[t] @ x + c[t],
        measurement_jacobian=lambda x, t: np.array(H[t]),
        Q=model.Q,
        R=model.R,
        Omega=model.Omega,
        m1=model.m1,
        P1=model.P1,
    )


# ---------------------------------------------------------------------------
# validation


def _check_matrix_field(report, model, name, rows, cols, spd=False):
    arr = getattr(model, name)
    if arr.ndim not in (2, 3):
        report.append(f"{name} must be 2-D or 3-D, got ndim={arr.ndim}")
        return
    if arr.ndim == 3 and arr.shape[0] != model.T:
        report.append(f"{name} has {arr.shape[0]} time steps, expected T={model.T}")
        return
    if arr.shape[-2:] != (rows, cols):
        report.append(f"{name} dimension mismatch: {arr.shape[-2:]} != {(rows, cols)}")
        return
    if not np.all(np.isfinite(arr)):
        report.append(f"{name} has non-finite entries")
        return
    if spd:
        mats = arr if arr.ndim == 3 else arr[None]
        label = f"{name[0]}_t" if name in ("Q", "R") else name
        start = 1 if (name == "Q" and arr.ndim == 3) else 0
        for t in range(start, mats.shape[0]):
            M = mats[t]
            if np.max(np.abs(M - M.T), initial=0.0) > 1e-10:
                report.append(f"{label} not symmetric (t={t})")
            elif not is_positive_definite(M):
                report.append(f"{label} not positive definite (t={t})")


def _fd_jacobian(fn, x, t):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e, t)) - np.asarray(fn(x - e, t))) / (2 * h))
    return np.stack(cols, axis=-1)


def validate_model(model: Model, check_jacobians: bool = False,
                   n_points: int = 3, seed: int = 0) -> list[str]:
    """Return a list of violations; an empty list means the model is valid.

    With `check_jacobians`, user Jacobians of a nonlinear model are compared
    against central finite differences at the prior mean and at `n_points`
    draws from the prior.
    """
    report: list[str] = []
    if model.T < 1:
        report.append("T must be >= 1")
        return report
    n = model.m1.shape[0] if model.m1.ndim == 1 else -1
    if n < 1:
        report.append("m1 must be a nonempty vector")
        return report
    _check_matrix_field(report, model, "P1", n, n, spd=True)
    _check_matrix_field(report, model, "Q", n, n, spd=True)
    if model.Omega.ndim in (2, 3):
        _check_matrix_field(report, model, "Omega", model.Omega.shape[-2], n)
        if model.Omega.shape[-2] < 1:
            report.append("Omega must have at least one row")
    else:
        report.append("Omega must be 2-D or 3-D")

    if isinstance(model, LinearModel):
        _check_matrix_field(report, model, "A", n, n)
        if model.H.ndim in (2, 3):
            ny = model.H.shape[-2]
            _check_matrix_field(report, model, "H", ny, n)
            _check_matrix_field(report, model, "R", ny, ny, spd=True)
        else:
            report.append("H must be 2-D or 3-D")
        for name, k in (("b", n), ("c", model.n_y)):
            off = getattr(model, name)
            if off is not None and off.shape != (model.T, k):
                report.append(f"offset {name} dimension mismatch: {off.shape} != {(model.T, k)}")
        return report

    ny = model.R.shape[-1] if model.R.ndim in (2, 3) else -1
    _check_matrix_field(report, model, "R", ny, ny, spd=True)
    if report:
        return report
    rng = np.random.default_rng(seed)
    points = [model.m1]
    if check_jacobians:
        L = np.linalg.cholesky(model.P1)
        points += [model.m1 + L @ rng.standard_normal(n) for _ in range(n_points)]
    t_dyn = 1 if model.T > 1 else None
    for x in points:
        hx = np.asarray(model.measurement(x, 0))
        Jh = np.asarray(model.measurement_jacobian(x, 0))
        if hx.shape != (ny,):
            report.append(f"measurement dimension mismatch: {hx.shape} != {(ny,)}")
        if Jh.shape != (ny, n):
            report.append(f"Jacobian dimension mismatch: measurement_jacobian returned {Jh.shape}, expected {(ny, n)}")
        checks = [("measurement", model.measurement, Jh, 0)]
        if t_dyn is not None:
            ax = np.asarray(model.dynamics(x, t_dyn))
            Ja = np.asarray(model.dynamics_jacobian(x, t_dyn))
            if ax.shape != (n,):
                report.append(f"dynamics dimension mismatch: {ax.shape} != {(n,)}")
            if Ja.shape != (n, n):
                report.append(f"Jacobian dimension mismatch: dynamics_jacobian returned {Ja.shape}, expected {(n, n)}")
            checks.append(("dynamics", model.dynamics, Ja, t_dyn))
        if report or not check_jacobians:
            continue
        for label, fn, J, t in checks:
            fd = _fd_jacobian(fn, x, t)
            scale = max(1.0, float(np.max(np.abs(fd))))
            if np.max(np.abs(J - fd)) > 1e-4 * scale:
                report.append(f"{label} Jacobian disagrees with finite differences at t={t}")
    return sorted(set(report), key=report.index)


# ---------------------------------------------------------------------------
# objective


def _check_traj(model: Model, x: Array) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.T, model.n_x):
        raise ModelError(f"trajectory shape {x.shape} != {(model.T, model.n_x)}")
    if not np.all(np.isfinite(x)):
        raise ModelError("non-finite trajectory")
    return x


def apply_omega(Omega: Array, x: Array) -> Array:
    """Per-timestep ``Omega[t] @ x[t]``."""
    if Omega.ndim == 2:
        return x @ Omega.T
    return np.einsum("tpn,tn->tp", Omega, x)


def apply_omega_t(Omega: Array, w: Array) -> Array:
    """Per-timestep ``Omega[t].T @ w[t]``."""
    if Omega.ndim == 2:
        return w @ Omega
    return np.einsum("tpn,tp->tn", Omega, w)


def _predict_all(model: Model, x: Array) -> tuple[Array, Array]:
    """Measurement predictions h_t(x_t) and dynamics predictions a_t(x_{t-1})."""
    if isinstance(model, LinearModel):
        hx = np.einsum("tij,tj->ti", model.steps("H"), x) + model.offsets("c")
        ax = np.einsum("tij,tj->ti", model.steps("A")[1:], x[:-1]) + model.offsets("b")[1:]
        return hx, ax
    hx = np.array([model.measurement(x[t], t) for t in range(model.T)]).reshape(model.T, -1)
    ax = np.array([model.dynamics(x[t - 1], t) for t in range(1, model.T)]).reshape(model.T - 1, -1)
    return hx, ax


def smoothing_objective(model: Model, x: Array, y: Array) -> float:
    """The quadratic part: measurement, dynamics, and prior terms."""
    x = _check_traj(model, x)
    y = np.asarray(y, dtype=float).reshape(model.T, -1)
    hx, ax = _predict_all(model, x)
    R = np.asarray(model.R)
    Q = np.asarray(model.Q)
    Q = Q[1:] if Q.ndim == 3 else Q
    val = _mahalanobis_sq(R, y - hx)
    val += _mahalanobis_sq(Q, x[1:] - ax)
    val += _mahalanobis_sq(model.P1, (x[0] - model.m1)[None])
    return 0.5 * val


def evaluate_objective(model: Model, x: Array, lam: float, y: Array) -> float:
    """Regularized smoothing cost of trajectory `x` given measurements `y`."""
    if lam < 0:
        raise ModelError("lambda must be nonnegative")
    val = smoothing_objective(model, x, y)
    if lam:
        val += lam * float(np.abs(apply_omega(model.Omega, np.asarray(x, float))).sum())
    return val


def augmented_lagrangian(model: Model, x: Array, w: Array, eta: Array,
                         rho: float, lam: float, y: Array) -> float:
    """Per-timestep evaluation of the ADMM augmented Lagrangian (unscaled dual)."""
    r = w - apply_omega(model.Omega, np.asarray(x, float))
    return (smoothing_objective(model, x, y) + lam * float(np.abs(w).sum())
            + float(np.sum(eta * r)) + 0.5 * rho * float(np.sum(r * r)))


# ---------------------------------------------------------------------------
# pseudo-measurements


@dataclass(frozen=True, eq=False)
class PseudoMeasurement:
    """Artificial observation channel ``Delta[t] = Theta[t] x[t] + noise(Sigma[t])``."""

    Theta: Array
    Delta: Array
    Sigma: Array

    def __post_init__(self):
        for name in ("Theta", "Delta", "Sigma"):
            object.__setattr__(self, name, _as_float(getattr(self, name)))

    @property
    def dim(self) -> int:
        return self.Theta.shape[-2]

    @property
    def T(self) -> int:
        return self.Delta.shape[0]


@dataclass(frozen=True, eq=False)
class AugmentedModel:
    """A model with a second, pseudo-measurement channel at every step.

    The smoother processes the real measurement first and the
    pseudo-measurement second at each time step.
    """

    model: Model
    pseudo: PseudoMeasurement

    def objective(self, x: Array, y: Array) -> float:
        return smoothing_objective(self.model, x, y) + pseudo_penalty(self.pseudo, x)


def pseudo_penalty(pseudo: Optional[PseudoMeasurement], x: Array) -> float:
    """``0.5 * sum_t ||Delta_t - Theta_t x_t||^2`` weighted by ``Sigma_t^{-1}``."""
    if pseudo is None:
        return 0.0
    r = pseudo.Delta - apply_omega(pseudo.Theta, np.asarray(x, float))
    return 0.5 * _mahalanobis_sq(pseudo.Sigma, r)


def augment_pseudo(model: Model, pseudo: PseudoMeasurement,
                   check_pd: bool = True) -> AugmentedModel:
    """Attach `pseudo` as a second measurement channel of `model`."""
    Th, De, Si = pseudo.Theta, pseudo.Delta, pseudo.Sigma
    p = Th.shape[-2]
    if Th.ndim not in (2, 3) or Th.shape[-1] != model.n_x:
        raise ModelError(f"Theta shape {Th.shape} incompatible with n_x={model.n_x}")
    if Th.ndim == 3 and Th.shape[0] != model.T:
        raise ModelError("Theta time axis does not match T")
    if De.shape != (model.T, p):
        raise ModelError(f"Delta shape {De.shape} != {(model.T, p)}")
    if Si.shape[-2:] != (p, p) or (Si.ndim == 3 and Si.shape[0] != model.T):
        raise ModelError(f"Sigma shape {Si.shape} incompatible with pseudo dimension {p}")
    if check_pd:
        mats = Si if Si.ndim == 3 else Si[None]
        for t, S in enumerate(mats):
            if np.max(np.abs(S - S.T), initial=0.0) > 1e-10 or not is_positive_definite(S):
                raise ModelError(f"Sigma_t not positive definite (t={t})")
    return AugmentedModel(model, pseudo)


# ---------------------------------------------------------------------------
# batch stacking


@dataclass(frozen=True, eq=False)
class BatchSystem:
    """Stacked form of a model over the whole horizon.

    Vectors are stacked time-major. Affine offsets of a linear model are
    folded into ``y`` (measurement offsets subtracted) and ``m`` (dynamics
    offsets in blocks 2..T). Block matrices use sparse containers for
    assembly only; solvers densify them.
    """

    T: int
    n_x: int
    n_y: int
    n_omega: int
    y: Array
    m: Array
    Q: sp.csr_matrix
    R: sp.csr_matrix
    Qinv: sp.csr_matrix
    Rinv: sp.csr_matrix
    Omega: sp.csr_matrix
    linear: bool
    H: Optional[sp.csr_matrix] = None
    Psi: Optional[sp.csr_matrix] = None
    model: Optional[Model] = field(default=None, repr=False)

    def h(self, x: Array) -> Array:
        if self.linear:
            return self.H @ x
        X = x.reshape(self.T, self.n_x)
        return np.concatenate([self.model.measurement(X[t], t) for t in range(self.T)])

    def a(self, x: Array) -> Array:
        """Stacked dynamics map ``vec(x_1, x_2 - a_2(x_1), ..., x_T - a_T(x_{T-1}))``."""
        if self.linear:
            return self.Psi @ x
        X = x.reshape(self.T, self.n_x)
        parts = [X[0]] + [X[t] - self.model.dynamics(X[t - 1], t) for t in range(1, self.T)]
        return np.concatenate(parts)

    def J_h(self, x: Array) -> sp.csr_matrix:
        if self.linear:
            return self.H
        X = x.reshape(self.T, self.n_x)
        return sp.block_diag([self.model.measurement_jacobian(X[t], t) for t in range(self.T)],
                             format="csr")

    def J_a(self, x: Array) -> sp.csr_matrix:
        if self.linear:
            return self.Psi
        X = x.reshape(self.T, self.n_x)
        jacs = [self.model.dynamics_jacobian(X[t - 1], t) for t in range(1, self.T)]
        return _bidiagonal(jacs, self.T, self.n_x)


def _bidiagonal(sub_blocks: Sequence[Array], T: int, n: int) -> sp.csr_matrix:
    """Identity block diagonal with ``-sub_blocks[t-1]`` below it."""
    M = sp.lil_matrix((T * n, T * n))
    M.setdiag(1.0)
    for t in range(1, T):
        M[t * n:(t + 1) * n, (t - 1) * n:t * n] = -np.asarray(sub_blocks[t - 1])
    return M.tocsr()


def _block_diag(mats: Array) -> sp.csr_matrix:
    return sp.block_diag(list(mats), format="csr")


def stack_batch(model: Model, y: Array, max_dim: int = DEFAULT_MAX_BATCH_DIM) -> BatchSystem:
    """Stack `model` and measurements `y` into a dense-solver batch system."""
    T, n = model.T, model.n_x
    if T * n > max_dim:
        raise BatchSizeError(
            f"batch size limit: T*n_x = {T * n} exceeds {max_dim}; use recursive solver")
    y = np.asarray(y, dtype=float).reshape(T, -1)
    Qs = np.array(model.steps("Q"))
    Qs[0] = model.P1
    Rs = model.steps("R")
    common = dict(
        T=T, n_x=n, n_y=model.n_y, n_omega=model.n_omega,
        Q=_block_diag(Qs), R=_block_diag(Rs),
        Qinv=_block_diag(np.linalg.inv(Qs)), Rinv=_block_diag(np.linalg.inv(Rs)),
        Omega=_block_diag(model.steps("Omega")), model=model,
    )
    m = np.zeros((T, n))
    m[0] = model.m1
    if isinstance(model, LinearModel):
        m[1:] = model.offsets("b")[1:]
        return BatchSystem(
            y=(y - model.offsets("c")).ravel(), m=m.ravel(), linear=True,
            H=_block_diag(model.steps("H")),
            Psi=_bidiagonal(model.steps("A")[1:], T, n), **common)
    return BatchSystem(y=y.ravel(), m=m.ravel(), linear=False, **common)


def _jacobians(model: Model, x: Array) -> tuple[Array, Array]:
    if isinstance(model, LinearModel):
        return model.steps("H"), model.steps("A")
    Jh = np.array([model.measurement_jacobian(x[t], t) for t in range(model.T)])
    Ja = np.empty((model.T, model.n_x, model.n_x))
    Ja[0] = np.eye(model.n_x)
    for t in range(1, model.T):
        Ja[t] = model.dynamics_jacobian(x[t - 1], t)
    return Jh, Ja


def _weighted(M: Array, r: Array) -> Array:
    """Per-timestep ``M_t^{-1} r_t``."""
    if r.size == 0:
        return r
    if M.ndim == 2:
        cf = sla.cho_factor(M, lower=True, check_finite=False)
        return sla.cho_solve(cf, r.T, check_finite=False).T
    return np.linalg.solve(M, r[..., None])[..., 0]


def smoothing_gradient(model: Model, x: Array, y: Array) -> Array:
    """Gradient of :func:`smoothing_objective` with respect to the trajectory."""
    x = _check_traj(model, x)
    y = np.asarray(y, dtype=float).reshape(model.T, -1)
    hx, ax = _predict_all(model, x)
    Jh, Ja = _jacobians(model, x)
    Q = np.asarray(model.Q)
    Q = Q[1:] if Q.ndim == 3 else Q
    ey = _weighted(np.asarray(model.R), y - hx)
    ed = _weighted(Q, x[1:] - ax)
    g = -np.einsum("tij,ti->tj", Jh, ey)
    g[1:] += ed
    g[:-1] -= np.einsum("tij,ti->tj", Ja[1:], ed)
    g[0] += _weighted(model.P1, (x[0] - model.m1)[None])[0]
    return g
