"""L1-regularized state estimation with Kalman-smoother-based variable splitting."""

from .errors import BatchSizeError, GaussNewtonError, ModelError, SmootherError, StaleCacheError
from .model import (
    BatchSystem,
    LinearModel,
    NonlinearModel,
    PseudoMeasurement,
    augment_pseudo,
    evaluate_objective,
    stack_batch,
    validate_model,
)
from .smoother import FilterCache, GaussianTrajectory, ieks_solve, ks_solve, precompute_gains
from .splitting import Solution, SplitState, SplittingConfig, run, soft_threshold

__all__ = [
    "BatchSizeError", "GaussNewtonError", "ModelError", "SmootherError", "StaleCacheError",
    "BatchSystem", "LinearModel", "NonlinearModel", "PseudoMeasurement", "augment_pseudo",
    "evaluate_objective", "stack_batch", "validate_model",
    "FilterCache", "GaussianTrajectory", "ieks_solve", "ks_solve", "precompute_gains",
    "Solution", "SplitState", "SplittingConfig", "run", "soft_threshold",
]
