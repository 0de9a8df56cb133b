"""Variable-splitting solvers whose x-subproblem is a Kalman smoother run.

Each variant encodes its quadratic x-subproblem as a pseudo-measurement
channel ``(Theta, Delta, Sigma)``:

========  =======  ==================  ==========
variant   Theta    Delta               Sigma
========  =======  ==================  ==========
ADMM      Omega    w + eta / rho       I / rho
PRS       Omega    w + eta / rho       I / rho
SBM       Omega    w + eta             I / rho
FOPD      I        x - rho Omega^T w   rho I
========  =======  ==================  ==========

ADMM and PRS carry the unscaled dual ``eta`` of the Lagrangian
``eta^T (w - Omega x)``; SBM carries the scaled dual (``eta_ADMM / rho``).
For FOPD, ``w`` is the dual variable of the L1 term and lies in
``[-lam, lam]``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import GaussNewtonError, ModelError, SmootherError
from .model import (
    LinearModel,
    Model,
    PseudoMeasurement,
    apply_omega,
    apply_omega_t,
    augmented_lagrangian,
    evaluate_objective,
    smoothing_gradient,
)
from .smoother import FilterCache, ieks_solve, ks_solve, precompute_gains

Array = np.ndarray
VARIANTS = ("ADMM", "PRS", "SBM", "FOPD")
HISTORY_COLUMNS = ("k", "objective", "aug_lagrangian", "primal_residual",
                   "dual_residual", "wall_time_s")


@dataclass
class SplittingConfig:
    variant: str = "ADMM"
    lam: float = 1.0
    rho: float = 1.0
    alpha: float = 0.9
    inner_m: int = 1
    tau: float = 1.0
    gamma: Optional[float] = None
    k_max: int = 20
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    i_max: int = 10
    eps: float = 1e-8
    adaptive_rho: bool = False
    backend: str = "auto"

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.variant == "PRS" and not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.inner_m < 1:
            raise ValueError("inner_m must be >= 1")
        if self.tau <= 0 or (self.gamma is not None and self.gamma <= 0):
            raise ValueError("tau and gamma must be > 0")
        if self.k_max < 0 or self.i_max < 1 or self.eps <= 0:
            raise ValueError("need k_max >= 0, i_max >= 1, eps > 0")


@dataclass
class SplitState:
    """Iterates of a splitting method; ``x`` is (T, n), ``w`` and ``eta`` (T, P)."""

    x: Array
    w: Array
    eta: Array
    k: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    x_hat: Optional[Array] = None

    def copy(self) -> "SplitState":
        return replace(self, x=self.x.copy(), w=self.w.copy(), eta=self.eta.copy(),
                       x_hat=None if self.x_hat is None else self.x_hat.copy())


@dataclass
class Solution:
    x: Array
    state: SplitState
    history: list = field(default_factory=list)
    status: str = "max-iterations"

    @property
    def iterations(self) -> int:
        return len(self.history)

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            w.writeheader()
            for row in self.history:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def soft_threshold(e: Array, kappa: float) -> Array:
    """Proximal operator of ``kappa * ||.||_1``."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    e = np.asarray(e, dtype=float)
    return np.sign(e) * np.maximum(np.abs(e) - kappa, 0.0)


def gamma_default(model: Model, rho: float) -> float:
    """Dual step ``1 / (rho * sigma_max(Omega)^2)``."""
    Om = model.steps("Omega")
    smax = max(np.linalg.norm(Om[t], 2) for t in range(Om.shape[0] if model.Omega.ndim == 3 else 1))
    return 1.0 / (rho * smax ** 2)


def channel(model: Model, variant: str, rho: float) -> tuple[Array, Array]:
    """Pseudo-measurement ``(Theta, Sigma)`` for a variant; independent of the iterates."""
    if variant in ("ADMM", "PRS", "SBM"):
        return model.Omega, np.eye(model.n_omega) / rho
    if variant == "FOPD":
        return np.eye(model.n_x), rho * np.eye(model.n_x)
    raise ModelError(f"unknown variant {variant!r}")


def pseudo_spec_for(variant: str, state: SplitState, config: SplittingConfig,
                    model: Model) -> PseudoMeasurement:
    variant = variant.upper()
    theta, sigma = channel(model, variant, config.rho)
    if variant in ("ADMM", "PRS"):
        delta = state.w + state.eta / config.rho
    elif variant == "SBM":
        delta = state.w + state.eta
    else:
        delta = state.x - config.rho * apply_omega_t(model.Omega, state.w)
    return PseudoMeasurement(theta, delta, sigma)


def _x_update(model: Model, pseudo: PseudoMeasurement, y: Array, config: SplittingConfig,
              x_prev: Array, cache: Optional[FilterCache]) -> Array:
    if isinstance(model, LinearModel):
        x, _ = ks_solve(model, pseudo, y, cache=cache, backend=config.backend)
        return x
    return ieks_solve(model, pseudo, y, x_prev, i_max=config.i_max, eps=config.eps,
                      backend=config.backend).x


def residuals(state: SplitState, model: Model, w_prev: Array, rho: float) -> tuple[float, float]:
    """Primal ``||w - Omega x||`` and dual ``rho ||Omega^T (w - w_prev)||``."""
    primal = float(np.linalg.norm(state.w - apply_omega(model.Omega, state.x)))
    dual = rho * float(np.linalg.norm(apply_omega_t(model.Omega, state.w - w_prev)))
    return primal, dual


def admm_step(state: SplitState, model: Model, y: Array, config: SplittingConfig,
              cache: Optional[FilterCache] = None) -> SplitState:
    rho, lam = config.rho, config.lam
    x = _x_update(model, pseudo_spec_for("ADMM", state, config, model), y, config, state.x, cache)
    Ox = apply_omega(model.Omega, x)
    w = soft_threshold(Ox - state.eta / rho, lam / rho)
    eta = state.eta + rho * (w - Ox)
    new = SplitState(x, w, eta, state.k + 1)
    new.primal_residual, new.dual_residual = residuals(new, model, state.w, rho)
    return new


def prs_step(state: SplitState, model: Model, y: Array, config: SplittingConfig,
             cache: Optional[FilterCache] = None) -> SplitState:
    rho, lam, a = config.rho, config.lam, config.alpha
    x = _x_update(model, pseudo_spec_for("PRS", state, config, model), y, config, state.x, cache)
    Ox = apply_omega(model.Omega, x)
    eta_half = state.eta + a * rho * (state.w - Ox)
    w = soft_threshold(Ox - eta_half / rho, lam / rho)
    eta = eta_half + a * rho * (w - Ox)
    new = SplitState(x, w, eta, state.k + 1)
    new.primal_residual, new.dual_residual = residuals(new, model, state.w, rho)
    return new


def sbm_step(state: SplitState, model: Model, y: Array, config: SplittingConfig,
             cache: Optional[FilterCache] = None) -> SplitState:
    rho, lam = config.rho, config.lam
    inner = state
    for _ in range(config.inner_m):
        x = _x_update(model, pseudo_spec_for("SBM", inner, config, model), y, config, inner.x, cache)
        Ox = apply_omega(model.Omega, x)
        w = soft_threshold(Ox - state.eta, lam / rho)
        inner = SplitState(x, w, state.eta, state.k)
    new = SplitState(inner.x, inner.w, state.eta + (inner.w - Ox), state.k + 1)
    new.primal_residual, new.dual_residual = residuals(new, model, state.w, rho)
    return new


def fopd_step(state: SplitState, model: Model, y: Array, config: SplittingConfig,
              cache: Optional[FilterCache] = None) -> SplitState:
    rho, lam, tau = config.rho, config.lam, config.tau
    gamma = config.gamma if config.gamma is not None else gamma_default(model, rho)
    x_hat = state.x if state.x_hat is None else state.x_hat
    w = np.clip(state.w + gamma * apply_omega(model.Omega, x_hat), -lam, lam)
    mid = SplitState(state.x, w, state.eta, state.k)
    x = _x_update(model, pseudo_spec_for("FOPD", mid, config, model), y, config, state.x, cache)
    new = SplitState(x, w, state.eta, state.k + 1, x_hat=x + tau * (x - state.x))
    new.primal_residual = float(np.linalg.norm(x - state.x))
    new.dual_residual = float(np.linalg.norm(w - state.w))
    return new


STEPS: dict[str, Callable] = {"ADMM": admm_step, "PRS": prs_step, "SBM": sbm_step,
                              "FOPD": fopd_step}


def lagrangian_value(model: Model, state: SplitState, config: SplittingConfig, y: Array) -> float:
    """Augmented Lagrangian in the unscaled-dual convention (NaN for FOPD)."""
    if config.variant == "FOPD":
        return float("nan")
    eta = state.eta * config.rho if config.variant == "SBM" else state.eta
    return augmented_lagrangian(model, state.x, state.w, eta, config.rho, config.lam, y)


def initial_trajectory(model: Model, y: Array, backend: str = "auto") -> Array:
    """Unregularized smoother solution; zeros if the smoother fails."""
    try:
        if isinstance(model, LinearModel):
            return ks_solve(model, None, y, backend=backend)[0]
        x = np.empty((model.T, model.n_x))
        x[0] = model.m1
        for t in range(1, model.T):
            x[t] = model.dynamics(x[t - 1], t)
        if not np.all(np.isfinite(x)):
            x = np.zeros_like(x)
        return ieks_solve(model, None, y, x, backend=backend).x
    except (SmootherError, GaussNewtonError, ModelError, np.linalg.LinAlgError):
        return np.zeros((model.T, model.n_x))


def initial_state(model: Model, x0: Array, variant: str) -> SplitState:
    x0 = np.array(x0, dtype=float)
    w0 = np.zeros((model.T, model.n_omega)) if variant == "FOPD" else apply_omega(model.Omega, x0)
    return SplitState(x0, w0, np.zeros((model.T, model.n_omega)))


def estimate_lipschitz(model: Model, y: Array, n_starts: int = 5, n_power: int = 30,
                       scale: float = 1.0, seed: int = 0, center: Optional[Array] = None) -> float:
    """Largest observed ``||grad(a) - grad(b)|| / ||a - b||`` of the smoothing term.

    Each start draws a random base point and direction, then refines the
    direction by power iteration on gradient differences so that the
    largest curvature is found rather than a typical one.
    """
    rng = np.random.default_rng(seed)
    base = np.zeros((model.T, model.n_x)) if center is None else np.asarray(center, float)
    best = 0.0
    for _ in range(n_starts):
        a = base + scale * rng.standard_normal(base.shape)
        ga = smoothing_gradient(model, a, y)
        d = rng.standard_normal(base.shape)
        for _ in range(n_power):
            d *= scale / np.linalg.norm(d)
            diff = smoothing_gradient(model, a + d, y) - ga
            best = max(best, float(np.linalg.norm(diff) / np.linalg.norm(d)))
            if not np.any(diff):
                break
            d = diff
    return best


def monotone_rho(model: Model, y: Array, factor: float = 1.5, **kwargs) -> float:
    """Penalty above ``L / sigma_min(Omega)^2`` using a sampled Lipschitz estimate."""
    Om = model.steps("Omega")
    count = Om.shape[0] if model.Omega.ndim == 3 else 1
    smin = min(np.linalg.svd(Om[t], compute_uv=False)[-1] for t in range(count))
    if Om.shape[1] < Om.shape[2] or smin <= 0:
        raise ModelError("Omega must have full column rank")
    return factor * estimate_lipschitz(model, y, **kwargs) / smin ** 2


def run(model: Model, y: Array, config: SplittingConfig, x0: Optional[Array] = None,
        cache: Optional[FilterCache] = None,
        callback: Optional[Callable[[SplitState], None]] = None) -> Solution:
    """Iterate a splitting variant until both residuals meet tolerance or ``k_max``."""
    y = np.asarray(y, dtype=float).reshape(model.T, -1)
    if x0 is None:
        x0 = initial_trajectory(model, y, config.backend)
    state = initial_state(model, x0, config.variant)
    step = STEPS[config.variant]
    cfg = replace(config)
    linear = isinstance(model, LinearModel)
    if linear and cache is None:
        theta, sigma = channel(model, cfg.variant, cfg.rho)
        cache = precompute_gains(model, theta, sigma, backend=cfg.backend, keep_covariances=False)
    history: list = []
    status = "max-iterations"
    t0 = time.perf_counter()
    for _ in range(cfg.k_max):
        try:
            state = step(state, model, y, cfg, cache if linear else None)
        except (SmootherError, GaussNewtonError, np.linalg.LinAlgError, FloatingPointError):
            status = "diverged"
            break
        if not (np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.w))):
            status = "diverged"
            break
        try:
            obj = evaluate_objective(model, state.x, cfg.lam, y)
        except ModelError:
            status = "diverged"
            break
        if not np.isfinite(obj):
            status = "diverged"
            break
        history.append({
            "k": state.k,
            "objective": obj,
            "aug_lagrangian": lagrangian_value(model, state, cfg, y),
            "primal_residual": state.primal_residual,
            "dual_residual": state.dual_residual,
            "wall_time_s": time.perf_counter() - t0,
        })
        if callback is not None:
            callback(state)
        if state.primal_residual <= cfg.tol_primal and state.dual_residual <= cfg.tol_dual:
            status = "converged"
            break
        if cfg.adaptive_rho and cfg.variant != "FOPD":
            new_rho = _balanced_rho(state, cfg.rho)
            if new_rho != cfg.rho:
                if cfg.variant == "SBM":
                    state.eta = state.eta * (cfg.rho / new_rho)
                cfg = replace(cfg, rho=new_rho)
                if linear:
                    theta, sigma = channel(model, cfg.variant, cfg.rho)
                    cache = precompute_gains(model, theta, sigma, backend=cfg.backend,
                                             keep_covariances=False)
    return Solution(state.x, state, history, status)


def _balanced_rho(state: SplitState, rho: float, ratio: float = 10.0) -> float:
    p, d = state.primal_residual, state.dual_residual
    if p > ratio * d:
        return rho * 2.0
    if d > ratio * p:
        return rho / 2.0
    return rho
