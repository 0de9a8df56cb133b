"""Experiment runner: metrics, lambda sweeps, scaling benchmarks, tomography.

Every experiment writes into one output directory::

    config.json     the resolved configuration
    summary.csv     one row per cell, no timing columns (deterministic)
    timing.csv      wall-clock times keyed like summary.csv
    runs/*.csv      per-run iteration histories
    manifest.json   maps each summary row to its history files
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .batch import batch_run
from .errors import BatchSizeError, GaussNewtonError, ModelError, SmootherError
from .imaging import ImageSequence, phantom_sequence, radon_matrix, tv_operator
from .model import LinearModel, stack_batch
from .modelio import ConfigError, load_matrix_csv, load_model
from .scenarios import coordinated_turn_model, simulate, tracking_instance
from .smoother import covariance_steps, ks_solve, precompute_gains
from .splitting import Solution, SplittingConfig, channel, run

Array = np.ndarray
EXPERIMENTS = ("linear-tracking", "coordinated-turn", "tomography", "lambda-sweep", "scaling")
SOLVER_ERRORS = (SmootherError, GaussNewtonError, ModelError, np.linalg.LinAlgError)


def relative_error(x_est: Array, x_true: Array) -> float:
    """Sum of per-step errors over sum of per-step true norms."""
    x_est = np.asarray(x_est, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x_est.shape != x_true.shape:
        raise ValueError(f"shape mismatch {x_est.shape} vs {x_true.shape}")
    x_est = x_est.reshape(x_true.shape[0], -1)
    x_true = x_true.reshape(x_true.shape[0], -1)
    denom = np.linalg.norm(x_true, axis=1).sum()
    if denom == 0:
        raise ValueError("relative error undefined for an all-zero reference")
    return float(np.linalg.norm(x_est - x_true, axis=1).sum() / denom)


def psnr(estimate: Array, truth: Array, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(estimate) - np.asarray(truth)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak ** 2 / mse)


def default_lambdas() -> list:
    return [float(v) for v in np.logspace(-2, 1, 50)]


@dataclass
class ExperimentConfig:
    """Experiment description; `model` holds model or geometry parameters."""

    experiment: str = "linear-tracking"
    model: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    variants: list = field(default_factory=lambda: ["ADMM"])
    seeds: list = field(default_factory=lambda: [0])
    lambdas: list = field(default_factory=default_lambdas)
    T_grid: list = field(default_factory=lambda: [1000, 10000, 100000])
    batch_T_grid: Optional[list] = None
    repeats: int = 3
    truth: str = "sparse-velocity"
    out: str = "results"
    jobs: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; valid: {', '.join(EXPERIMENTS)}")
        for name in ("seeds", "lambdas", "T_grid", "variants"):
            if not list(getattr(self, name)):
                raise ConfigError(f"{name} must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if list(self.T_grid) != sorted(self.T_grid):
            raise ConfigError("T_grid must be ascending")
        if self.repeats < 1 or self.jobs < 1:
            raise ConfigError("repeats and jobs must be >= 1")
        try:
            self.solver_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solver settings: {exc}") from exc

    def solver_config(self, **overrides) -> SplittingConfig:
        return SplittingConfig(**{**self.solver, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# problem instances and single runs


def make_instance(cfg: ExperimentConfig, seed: int, T: Optional[int] = None):
    """``(model, x_true or None, y)`` for one seed."""
    params = dict(cfg.model)
    if "file" in params:
        model = load_model(params["file"])
        if "measurements" in params:
            y = load_matrix_csv(params["measurements"])
            truth = load_matrix_csv(params["truth"]) if "truth" in params else None
            return model, truth, y
        x, y = simulate(model, T=T, seed=seed)
        return model, x, y
    name = params.pop("name", "coordinated-turn" if cfg.experiment == "coordinated-turn"
                      else "linear-tracking")
    if T is not None:
        params["T"] = T
    try:
        if name == "linear-tracking":
            return tracking_instance(seed=seed, truth=cfg.truth, **params)
        if name == "coordinated-turn":
            model = coordinated_turn_model(**params)
            x, y = simulate(model, seed=seed)
            return model, x, y
    except TypeError as exc:
        raise ConfigError(f"bad model parameters: {exc}") from exc
    raise ConfigError(f"unknown model {name!r}")


@dataclass
class RunRecord:
    key: str
    seed: int
    variant: str
    lam: float
    rel_error: float
    objective: float
    iterations: int
    status: str
    wall_time_s: float
    solution: Optional[Solution] = field(default=None, repr=False)


def solve_cell(cfg: ExperimentConfig, seed: int, variant: str, lam: float,
               instance=None) -> RunRecord:
    key = f"{variant}_lam{lam:.6g}_seed{seed}"
    model, x_true, y = instance if instance is not None else make_instance(cfg, seed)
    scfg = cfg.solver_config(variant=variant, lam=lam)
    t0 = time.perf_counter()
    try:
        sol = run(model, y, scfg)
    except SOLVER_ERRORS:
        return RunRecord(key, seed, variant, lam, math.nan, math.nan, 0, "diverged",
                         time.perf_counter() - t0)
    wall = time.perf_counter() - t0
    err = relative_error(sol.x, x_true) if x_true is not None else math.nan
    obj = sol.history[-1]["objective"] if sol.history else math.nan
    return RunRecord(key, seed, variant, lam, err, obj, sol.iterations, sol.status, wall, sol)


def _map(fn: Callable, items: Iterable, jobs: int) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def solve_runs(cfg: ExperimentConfig) -> list[RunRecord]:
    """Every (variant, seed) pair at the solver's lambda."""
    lam = cfg.solver_config().lam
    cells = [(v, s) for v in cfg.variants for s in cfg.seeds]
    return sorted(_map(lambda c: solve_cell(cfg, c[1], c[0], lam), cells, cfg.jobs),
                  key=lambda r: (r.variant, r.seed))


def sweep_lambda(cfg: ExperimentConfig, keep_runs: bool = False):
    """Mean relative error and wall time per (variant, lambda), averaged over seeds.

    Failed cells count as missing values. Returns ``(rows, runs)``; `runs`
    is empty unless `keep_runs`.
    """
    instances = {s: make_instance(cfg, s) for s in cfg.seeds}
    cells = [(v, float(lam), s) for v in cfg.variants for lam in cfg.lambdas for s in cfg.seeds]
    runs = _map(lambda c: solve_cell(cfg, c[2], c[0], c[1], instances[c[2]]), cells, cfg.jobs)
    rows = []
    for v in cfg.variants:
        for lam in cfg.lambdas:
            cell = [r for r in runs if r.variant == v and r.lam == float(lam)]
            errs = [r.rel_error for r in cell if r.status != "diverged"]
            rows.append({
                "variant": v, "lam": float(lam),
                "mean_rel_error": float(np.mean(errs)) if errs else math.nan,
                "mean_wall_time_s": float(np.mean([r.wall_time_s for r in cell])),
                "n_runs": len(cell), "n_failed": len(cell) - len(errs),
            })
    return rows, (sorted(runs, key=lambda r: (r.variant, r.lam, r.seed)) if keep_runs else [])


def _time_min(fn: Callable, repeats: int) -> tuple[float, object]:
    best, out = math.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def scaling_bench(cfg: ExperimentConfig) -> list[dict]:
    """Wall time at a fixed 10-iteration budget for smoother and batch solvers."""
    seed = cfg.seeds[0]
    batch_grid = cfg.T_grid if cfg.batch_T_grid is None else cfg.batch_T_grid
    rows = []
    for variant in cfg.variants:
        scfg = cfg.solver_config(variant=variant, k_max=10,
                                 tol_primal=0.0, tol_dual=0.0)
        for T in sorted(set(cfg.T_grid) | set(batch_grid)):
            model, _, y = make_instance(cfg, seed, T=T)
            if T in cfg.T_grid:
                run(model, y, scfg)  # warm-up (JIT, caches)
                wall, sol = _time_min(lambda: run(model, y, scfg), cfg.repeats)
                rows.append({"T": T, "variant": variant, "solver": "smoother",
                             "iterations": sol.iterations, "status": "ok", "wall_time_s": wall})
            if T in batch_grid:
                try:
                    batch = stack_batch(model, y)
                except BatchSizeError:
                    rows.append({"T": T, "variant": variant, "solver": "batch", "iterations": 0,
                                 "status": "batch size limit", "wall_time_s": math.nan})
                    continue
                wall, sol = _time_min(lambda: batch_run(batch, scfg), cfg.repeats)
                rows.append({"T": T, "variant": variant, "solver": "batch",
                             "iterations": sol.iterations, "status": "ok", "wall_time_s": wall})
    return rows


# ---------------------------------------------------------------------------
# tomography

TOMOGRAPHY_DEFAULTS = dict(s=32, frames=8, n_angles=30, n_detectors=None, noise=0.5,
                           q=0.01, p1=0.1, m1=0.3, data=None)


@dataclass
class TomographyReport:
    rows: list
    reconstructions: dict
    truths: dict
    n_rays: int
    empty_rays: int

    @property
    def mean_psnr_gain(self) -> float:
        return float(np.mean([r["psnr_admm"] - r["psnr_baseline"] for r in self.rows]))


def tomography_model(s: int, frames: int, n_angles: int, n_detectors=None, noise=0.5,
                     q=0.01, p1=0.1, m1=0.3):
    """Random-walk image model observed through a parallel-beam projector."""
    proj = radon_matrix(s, n_angles, n_detectors)
    H = proj.matrix.toarray()
    n = s * s
    model = LinearModel(A=np.eye(n), H=H, Q=q * np.eye(n), R=noise ** 2 * np.eye(H.shape[0]),
                        Omega=tv_operator(s).toarray(), m1=np.full(n, m1), P1=p1 * np.eye(n),
                        T=frames)
    return model, proj


def run_tomography(cfg: ExperimentConfig, out_dir=None) -> TomographyReport:
    """KS-ADMM reconstruction against a plain smoother baseline, per seed.

    Gains for both solvers are computed once and shared by all seeds. Each
    row records ``covariance_steps_after_first``, the number of covariance
    recursion steps performed after the first outer iteration.
    """
    p = {**TOMOGRAPHY_DEFAULTS, **cfg.model}
    unknown = sorted(set(p) - set(TOMOGRAPHY_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown tomography keys: {unknown}")
    loaded = None
    if p["data"]:
        path = Path(p["data"])
        loaded = ImageSequence.from_csv_dir(path) if path.is_dir() else ImageSequence.from_blob(path)
        p["s"], p["frames"] = loaded.s, loaded.T
    model, proj = tomography_model(p["s"], p["frames"], p["n_angles"], p["n_detectors"],
                                   p["noise"], p["q"], p["p1"], p["m1"])
    scfg = cfg.solver_config(variant="ADMM")
    plain = precompute_gains(model, keep_covariances=False)
    theta, sigma = channel(model, "ADMM", scfg.rho)
    gains = precompute_gains(model, theta, sigma, keep_covariances=False)
    H = model.H
    rows, recons, truths = [], {}, {}
    for seed in cfg.seeds:
        truth = loaded if loaded is not None else phantom_sequence(p["s"], p["frames"], seed)
        rng = np.random.default_rng([seed, 7])
        y = truth.frames @ H.T + p["noise"] * rng.standard_normal((truth.T, H.shape[0]))
        x0, _ = ks_solve(model, None, y, cache=plain)
        counts = []
        sol = run(model, y, scfg, x0=x0, cache=gains,
                  callback=lambda st: counts.append(covariance_steps.value))
        base_img = np.clip(x0, 0, 1)
        admm_img = np.clip(sol.x, 0, 1)
        rows.append({
            "seed": seed, "n_angles": p["n_angles"],
            "psnr_baseline": psnr(base_img, truth.frames),
            "psnr_admm": psnr(admm_img, truth.frames),
            "iterations": sol.iterations, "status": sol.status,
            "covariance_steps_after_first": counts[-1] - counts[0] if counts else 0,
        })
        recons[seed] = ImageSequence(p["s"], admm_img)
        truths[seed] = truth
        if out_dir is not None:
            _write_tomography_outputs(Path(out_dir), seed, recons[seed], sol)
    return TomographyReport(rows, recons, truths, proj.shape[0], len(proj.empty_rows))


def _write_tomography_outputs(out: Path, seed: int, recon: ImageSequence, sol: Solution):
    img_dir = out / "images" / f"seed{seed}"
    img_dir.mkdir(parents=True, exist_ok=True)
    recon.to_blob(img_dir / "reconstruction.l1sm")
    for t in range(recon.T):
        recon.write_pgm(img_dir / f"frame_{t:04d}.pgm", t)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    sol.write_history(out / "runs" / f"tomography_seed{seed}.csv")


# ---------------------------------------------------------------------------
# report directory


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


@dataclass
class ExperimentResult:
    out_dir: Path
    summary: list
    diverged: int


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Dispatch on ``cfg.experiment`` and write the report directory."""
    out = Path(out_dir if out_dir is not None else cfg.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {"experiment": cfg.experiment, "summary": "summary.csv",
                "timing": "timing.csv", "rows": []}
    kind = cfg.experiment
    if kind in ("linear-tracking", "coordinated-turn"):
        runs = solve_runs(cfg)
        summary, timing = [], []
        for i, r in enumerate(runs):
            hist = f"runs/{r.key}.csv"
            if r.solution is not None:
                r.solution.write_history(out / hist)
            summary.append({"key": r.key, "variant": r.variant, "seed": r.seed, "lam": r.lam,
                            "rel_error": r.rel_error, "objective": r.objective,
                            "iterations": r.iterations, "status": r.status})
            timing.append({"key": r.key, "wall_time_s": r.wall_time_s})
            manifest["rows"].append({"row": i, "key": r.key,
                                     "history": [hist] if r.solution is not None else []})
        cols = ["key", "variant", "seed", "lam", "rel_error", "objective", "iterations", "status"]
        diverged = sum(r.status == "diverged" for r in runs)
    elif kind == "lambda-sweep":
        rows, runs = sweep_lambda(cfg, keep_runs=True)
        for r in runs:
            if r.solution is not None:
                r.solution.write_history(out / f"runs/{r.key}.csv")
        summary, timing = [], []
        for i, row in enumerate(rows):
            key = f"{row['variant']}_lam{row['lam']:.6g}"
            summary.append({"key": key, **{k: v for k, v in row.items() if k != "mean_wall_time_s"}})
            timing.append({"key": key, "wall_time_s": row["mean_wall_time_s"]})
            hist = [f"runs/{r.key}.csv" for r in runs
                    if r.variant == row["variant"] and r.lam == row["lam"] and r.solution is not None]
            manifest["rows"].append({"row": i, "key": key, "history": hist})
        cols = ["key", "variant", "lam", "mean_rel_error", "n_runs", "n_failed"]
        diverged = sum(r.status == "diverged" for r in runs)
    elif kind == "scaling":
        rows = scaling_bench(cfg)
        summary, timing = [], []
        for i, row in enumerate(rows):
            key = f"{row['solver']}_{row['variant']}_T{row['T']}"
            summary.append({"key": key, **{k: v for k, v in row.items() if k != "wall_time_s"}})
            timing.append({"key": key, "wall_time_s": row["wall_time_s"]})
            manifest["rows"].append({"row": i, "key": key, "history": []})
        cols = ["key", "T", "variant", "solver", "iterations", "status"]
        diverged = 0
    else:
        t0 = time.perf_counter()
        report = run_tomography(cfg, out)
        summary = [{"key": f"seed{r['seed']}", **r} for r in report.rows]
        timing = [{"key": "all", "wall_time_s": time.perf_counter() - t0}]
        for i, r in enumerate(report.rows):
            manifest["rows"].append({"row": i, "key": f"seed{r['seed']}",
                                     "history": [f"runs/tomography_seed{r['seed']}.csv"]})
        cols = ["key", "seed", "n_angles", "psnr_baseline", "psnr_admm", "iterations", "status",
                "covariance_steps_after_first"]
        diverged = sum(r["status"] == "diverged" for r in report.rows)
    _write_csv(out / "summary.csv", summary, cols)
    _write_csv(out / "timing.csv", timing, ["key", "wall_time_s"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return ExperimentResult(out, summary, diverged)
