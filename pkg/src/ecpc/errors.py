"""Exception types shared across the package."""


class EcpcError(Exception):
    """Base class for all package-specific errors."""


class DataError(EcpcError):
    """Malformed or inconsistent input data."""


class CoverageError(DataError):
    """A covariate is not covered by any group of a grouping."""


class ConvergenceError(EcpcError):
    """An iterative solver failed to converge.

    Carries the last iterate so callers can inspect or salvage it.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SingularSystemError(EcpcError):
    """A linear system was numerically singular."""
