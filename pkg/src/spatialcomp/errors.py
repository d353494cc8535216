"""Exception types shared across the package."""


class SpatialError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(SpatialError, ValueError):
    """A factorization met a non-positive pivot (invalid covariance parameters)."""


class SingularFactor(SpatialError, ValueError):
    """A triangular factor has a zero on its diagonal."""


class InsufficientPoints(SpatialError, ValueError):
    pass


class NonConvergence(SpatialError, RuntimeError):
    """An iterative fit did not converge.

    ``best`` carries the best iterate found, when one exists.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class TooLarge(SpatialError, ValueError):
    pass


class SolverFailure(SpatialError, RuntimeError):
    pass


class LengthMismatch(SpatialError, ValueError):
    pass


class InvalidInterval(SpatialError, ValueError):
    pass


class ParseError(SpatialError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeometryMismatch(SpatialError, ValueError):
    pass


class EmptyTest(SpatialError, ValueError):
    pass


class EmptyTrain(SpatialError, ValueError):
    pass
