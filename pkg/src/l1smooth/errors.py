"""Exception types raised by the solvers."""


class ModelError(ValueError):
    """A model or pseudo-measurement description is inconsistent."""


class SmootherError(RuntimeError):
    """A filtering or smoothing recursion hit a singular matrix."""


class StaleCacheError(RuntimeError):
    """A precomputed filter cache was reused with different matrices."""


class BatchSizeError(MemoryError):
    """The dense batch system would exceed the configured size limit."""


class GaussNewtonError(RuntimeError):
    """The Gauss--Newton normal matrix is not positive definite."""
