"""Exception types shared across the package."""


class CodemapError(Exception):
    """Base class for errors raised by this package."""


class BehindCameraError(CodemapError, ValueError):
    """A point with non-positive camera-frame depth was projected."""


class InvalidDepthError(CodemapError, ValueError):
    """A non-positive (or otherwise unusable) depth was supplied."""


class OutOfViewError(CodemapError, ValueError):
    """A warped pixel left the target image domain."""


class DomainError(CodemapError, ValueError):
    """An argument fell outside the mathematical domain of an operation."""


class InsufficientConditioningError(CodemapError, ValueError):
    """Too few sparse points to condition a decoder."""


class FormatError(CodemapError, ValueError):
    """A serialized artifact (PFM, manifest, weights, config) is malformed."""


class SolverError(CodemapError, RuntimeError):
    """The window solver could not start (non-finite energy, bad problem)."""
