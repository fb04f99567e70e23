"""Exception hierarchy shared across the package.

Domain violations on individual operations (negative depth, bad rotation
angle, ...) raise plain ``ValueError``; the classes below mark failures
that the CLI maps to distinct exit codes.
"""


class StereoVoError(Exception):
    """Base class for package-specific failures."""


class ConfigError(StereoVoError):
    """Invalid configuration; the message names the offending field path."""


class DataFormatError(StereoVoError):
    """Malformed trajectory or observation file."""


class NumericalError(StereoVoError):
    """Numerical failure (degenerate geometry, non-finite values, ...)."""


class DegenerateGeometryError(NumericalError):
    """Matched points are collinear; the pose is not observable."""


class InsufficientKeypointsError(NumericalError):
    """Fewer keypoints survived selection than the optimizer needs."""
