"""Dense batch solvers used as reference oracles and as a scaling baseline.

Everything here works on the stacked system of :func:`l1smooth.model.stack_batch`
and forms the full ``(T n_x) x (T n_x)`` normal matrix, factoring it from
scratch at every x-update.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import GaussNewtonError, ModelError
from .model import BatchSystem
from .splitting import HISTORY_COLUMNS, Solution, SplitState, SplittingConfig, _balanced_rho, soft_threshold

Array = np.ndarray


@dataclass
class BatchIterate:
    """Stacked ``x`` of length ``T n_x`` and ``w``, ``eta`` of length ``T P``."""

    x: Array
    w: Array
    eta: Array
    x_hat: Optional[Array] = None

    @classmethod
    def from_state(cls, state: SplitState) -> "BatchIterate":
        return cls(state.x.ravel().copy(), state.w.ravel().copy(), state.eta.ravel().copy(),
                   None if state.x_hat is None else state.x_hat.ravel().copy())

    def to_state(self, batch: BatchSystem, k: int = 0) -> SplitState:
        T = batch.T
        return SplitState(self.x.reshape(T, -1).copy(), self.w.reshape(T, -1).copy(),
                          self.eta.reshape(T, -1).copy(), k,
                          x_hat=None if self.x_hat is None else self.x_hat.reshape(T, -1).copy())


def _dense(M) -> Array:
    return M.toarray() if sp.issparse(M) else np.asarray(M)


def _solve_spd(N: Array, rhs: Array, message: str) -> Array:
    try:
        cf = sla.cho_factor(N, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise GaussNewtonError(message) from exc
    return sla.cho_solve(cf, rhs, check_finite=False)


def _penalized_solve(batch: BatchSystem, x: Array, theta, weight: float, target: Array) -> Array:
    """Minimize the linearized smoothing cost plus ``weight/2 ||theta x - target||^2``.

    The linearization is taken at ``x``; for linear systems it is exact.
    """
    Jh, Ja = _dense(batch.J_h(x)), _dense(batch.J_a(x))
    Ri, Qi = batch.Rinv, batch.Qinv
    Th = _dense(theta)
    ry = batch.y - batch.h(x) + Jh @ x
    rm = batch.m - batch.a(x) + Ja @ x
    N = Jh.T @ (Ri @ Jh) + Ja.T @ (Qi @ Ja) + weight * (Th.T @ Th)
    rhs = Jh.T @ (Ri @ ry) + Ja.T @ (Qi @ rm) + weight * (Th.T @ target)
    return _solve_spd(N, rhs, "rank-deficient Gauss--Newton system")


def batch_x_update(batch: BatchSystem, w: Array, eta: Array, rho: float) -> Array:
    """Closed-form x-update of ADMM for a linear stacked system."""
    if not batch.linear:
        raise ModelError("batch_x_update needs a linear system; use gn_step")
    x = np.zeros(batch.T * batch.n_x)
    return _penalized_solve(batch, x, batch.Omega, rho, w + eta / rho)


def gn_gradient(batch: BatchSystem, x: Array, w: Array, eta: Array, rho: float) -> Array:
    """Gradient of ``f(x) = smoothing cost + rho/2 ||w - Omega x + eta/rho||^2``."""
    vals = (x, w, eta)
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise ModelError("non-finite input to gn_gradient")
    Jh, Ja = batch.J_h(x), batch.J_a(x)
    g = -(Jh.T @ (batch.Rinv @ (batch.y - batch.h(x))))
    g = g + Ja.T @ (batch.Qinv @ (batch.a(x) - batch.m))
    if rho:
        g = g - rho * (batch.Omega.T @ (w - batch.Omega @ x + eta / rho))
    return np.asarray(g).ravel()


def gn_step(batch: BatchSystem, x: Array, w: Array, eta: Array, rho: float) -> Array:
    """One Gauss-Newton iterate for the ADMM x-subproblem."""
    target = w + eta / rho if rho else np.zeros(batch.Omega.shape[0])
    return _penalized_solve(batch, np.asarray(x, float), batch.Omega, rho, target)


def smoothing_cost(batch: BatchSystem, x: Array) -> float:
    ry = batch.y - batch.h(x)
    rm = batch.a(x) - batch.m
    return 0.5 * float(ry @ (batch.Rinv @ ry) + rm @ (batch.Qinv @ rm))


def augmented_lagrangian(batch: BatchSystem, x: Array, w: Array, eta: Array,
                         rho: float, lam: float) -> float:
    vals = (x, w, eta)
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise ModelError("non-finite input to augmented_lagrangian")
    r = w - batch.Omega @ x
    return (smoothing_cost(batch, x) + lam * float(np.abs(w).sum())
            + float(eta @ r) + 0.5 * rho * float(r @ r))


def batch_objective(batch: BatchSystem, x: Array, lam: float) -> float:
    return smoothing_cost(batch, x) + lam * float(np.abs(batch.Omega @ x).sum())


def _x_subproblem(batch: BatchSystem, x: Array, theta, weight: float, target: Array,
                  config: SplittingConfig) -> Array:
    if batch.linear:
        return _penalized_solve(batch, x, theta, weight, target)
    for _ in range(config.i_max):
        x_new = _penalized_solve(batch, x, theta, weight, target)
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step <= config.eps:
            break
    return x


def _gamma(batch: BatchSystem, rho: float) -> float:
    smax = sla.svdvals(_dense(batch.Omega))[0] if batch.Omega.shape[0] else 1.0
    return 1.0 / (rho * smax ** 2)


def batch_step(batch: BatchSystem, it: BatchIterate, config: SplittingConfig):
    """One iteration of ``config.variant``; returns ``(iterate, primal, dual)``."""
    rho, lam, Om = config.rho, config.lam, batch.Omega
    v = config.variant
    if v in ("ADMM", "PRS"):
        x = _x_subproblem(batch, it.x, Om, rho, it.w + it.eta / rho, config)
        Ox = Om @ x
        if v == "ADMM":
            w = soft_threshold(Ox - it.eta / rho, lam / rho)
            eta = it.eta + rho * (w - Ox)
        else:
            a = config.alpha
            eta_half = it.eta + a * rho * (it.w - Ox)
            w = soft_threshold(Ox - eta_half / rho, lam / rho)
            eta = eta_half + a * rho * (w - Ox)
    elif v == "SBM":
        x, w = it.x, it.w
        for _ in range(config.inner_m):
            x = _x_subproblem(batch, x, Om, rho, w + it.eta, config)
            Ox = Om @ x
            w = soft_threshold(Ox - it.eta, lam / rho)
        eta = it.eta + (w - Ox)
    elif v == "FOPD":
        gamma = config.gamma if config.gamma is not None else _gamma(batch, rho)
        x_hat = it.x if it.x_hat is None else it.x_hat
        w = np.clip(it.w + gamma * (Om @ x_hat), -lam, lam)
        eye = sp.identity(batch.T * batch.n_x, format="csr")
        x = _x_subproblem(batch, it.x, eye, 1.0 / rho, it.x - rho * (Om.T @ w), config)
        new = BatchIterate(x, w, it.eta, x + config.tau * (x - it.x))
        return new, float(np.linalg.norm(x - it.x)), float(np.linalg.norm(w - it.w))
    else:
        raise ModelError(f"unknown variant {v!r}")
    primal = float(np.linalg.norm(w - Om @ x))
    dual = rho * float(np.linalg.norm(Om.T @ (w - it.w)))
    return BatchIterate(x, w, eta), primal, dual


def batch_initial(batch: BatchSystem, config: SplittingConfig) -> Array:
    """Unregularized MAP estimate (plain least squares or Gauss-Newton)."""
    x = batch.m.copy()
    if not batch.linear:
        X = x.reshape(batch.T, batch.n_x)
        for t in range(1, batch.T):
            X[t] = batch.model.dynamics(X[t - 1], t)
    empty = sp.csr_matrix((0, batch.T * batch.n_x))
    return _x_subproblem(batch, x, empty, 0.0, np.zeros(0), config)


def batch_run(batch: BatchSystem, config: SplittingConfig, x0: Optional[Array] = None) -> Solution:
    """Dense counterpart of :func:`l1smooth.splitting.run`."""
    cfg = replace(config)
    x0 = batch_initial(batch, cfg) if x0 is None else np.asarray(x0, float).ravel()
    P = batch.Omega.shape[0]
    w0 = np.zeros(P) if cfg.variant == "FOPD" else batch.Omega @ x0
    it = BatchIterate(x0.copy(), w0, np.zeros(P))
    history: list = []
    status = "max-iterations"
    t0 = time.perf_counter()
    primal = dual = float("nan")
    for k in range(1, cfg.k_max + 1):
        try:
            it, primal, dual = batch_step(batch, it, cfg)
        except (GaussNewtonError, np.linalg.LinAlgError):
            status = "diverged"
            break
        obj = batch_objective(batch, it.x, cfg.lam) if np.all(np.isfinite(it.x)) else np.nan
        if not np.isfinite(obj):
            status = "diverged"
            break
        if cfg.variant == "FOPD":
            lag = float("nan")
        else:
            eta = it.eta * cfg.rho if cfg.variant == "SBM" else it.eta
            lag = augmented_lagrangian(batch, it.x, it.w, eta, cfg.rho, cfg.lam)
        row = dict(zip(HISTORY_COLUMNS, (k, obj, lag,
                                         primal, dual, time.perf_counter() - t0)))
        history.append(row)
        if primal <= cfg.tol_primal and dual <= cfg.tol_dual:
            status = "converged"
            break
        if cfg.adaptive_rho and cfg.variant != "FOPD":
            probe = SplitState(it.x, it.w, it.eta, k, primal, dual)
            new_rho = _balanced_rho(probe, cfg.rho)
            if new_rho != cfg.rho:
                if cfg.variant == "SBM":
                    it.eta = it.eta * (cfg.rho / new_rho)
                cfg = replace(cfg, rho=new_rho)
    state = it.to_state(batch, len(history))
    state.primal_residual, state.dual_residual = primal, dual
    return Solution(state.x, state, history, status)
