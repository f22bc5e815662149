"""Exception hierarchy shared by all modules."""


class LBMError(Exception):
    """Base class for every error raised by this package."""


class ConvergenceError(LBMError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message, achieved_tol=None):
        super().__init__(message)
        self.achieved_tol = achieved_tol


class EmbeddingError(LBMError):
    """Circulant embedding of a covariance is not nonnegative definite."""


class ResolutionError(LBMError):
    """A requested length scale is below the grid resolution."""


class WindowExitError(LBMError):
    """A Brownian path left the window on which the field is known."""

    def __init__(self, message, exit_time, path_index=None):
        super().__init__(message)
        self.exit_time = exit_time
        self.path_index = path_index


class HorizonError(LBMError):
    """A time-change was requested beyond the range of the base path."""


class NestingError(LBMError):
    """Measures at consecutive levels do not share their common bands."""


class ConfigError(LBMError):
    """Invalid experiment configuration."""


class SingularityError(LBMError, ValueError):
    """A kernel was evaluated on its diagonal singularity."""
