"""
Exception hierarchy for the gaze geometry lab.

Every error derives from ValueError as well, so callers that only know the
builtin still catch them. The CLI maps DataError to exit code 2 and
NumericalError to exit code 3.
"""


class GazeLabError(ValueError):
    """Base class for all errors raised by this package."""

    exit_code = 2


# ── Data errors (bad input, exit 2) ──

class DataError(GazeLabError):
    exit_code = 2


class InvalidVectorError(DataError):
    """A direction was zero-length, non-finite or not unit where unit is required."""


class DegenerateRayError(DataError):
    """A ray was requested between two coincident points."""


class NoIntersectionError(DataError):
    """A ray runs parallel to the plane it was intersected with."""


class BehindCameraError(DataError):
    """A point or intersection lies at non-positive depth."""


class InsufficientDataError(DataError):
    """Not enough samples, observations or correspondences for an operation."""


class EstimatorUnavailableError(DataError):
    """An estimator cannot answer for this frame (missing features, no record)."""


class ConfigError(DataError):
    """A configuration value is missing, out of range or inconsistent."""


class FormatError(DataError):
    """A file could not be parsed. Carries the path and 1-based line when known."""

    def __init__(self, message, path=None, line=None):
        self.path = str(path) if path is not None else None
        self.line = line
        location = ''
        if self.path and line:
            location = f"{self.path}:{line}: "
        elif self.path:
            location = f"{self.path}: "
        elif line:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class ParseError(FormatError):
    """Malformed line or token."""


class VersionError(FormatError):
    """Unsupported format name or a newer major version than this reader knows."""


class SchemaError(FormatError):
    """Structurally valid input that is missing fields or has wrong shapes."""


class UnitError(FormatError):
    """A quantity carried an unknown or mismatched unit suffix."""


class UnsortedTimestampsError(FormatError):
    """A stream's timestamps are not strictly increasing."""


# ── Numerical failures (exit 3) ──

class NumericalError(GazeLabError):
    exit_code = 3


class PoseFailureError(NumericalError):
    """Pose solver diverged or produced a pose with points behind the camera."""


class DegenerateGeometryError(NumericalError):
    """Degenerate configuration: collinear points, singular warp, point at infinity."""


class IllConditionedError(NumericalError):
    """A linear system is too poorly conditioned to trust (e.g. parallel mirrors)."""


class NoSolutionError(NumericalError):
    """A closed-form solve has no real solution (e.g. ray misses the eyeball)."""
