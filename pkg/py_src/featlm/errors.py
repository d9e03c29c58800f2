"""Exception classes for featlm."""

from __future__ import annotations


class FeatLMError(Exception):
    """Base exception for all featlm errors."""


class InvalidArgumentError(FeatLMError, ValueError):
    """Raised when an argument is non-finite, negative, or otherwise out of range."""


class ConfigError(InvalidArgumentError):
    """Raised when a configuration object violates its invariants."""


class LieError(FeatLMError):
    """Raised when an SE(3) operation fails."""


class AmbiguousLogarithmError(LieError):
    """Raised when the logarithm of a rotation at (or too close to) pi is requested."""


class CameraError(FeatLMError):
    """Raised when a projection or backprojection fails."""


class BehindCameraError(CameraError):
    """Raised when a point lies at or behind the ``z_min`` plane."""


class InvalidDepthError(CameraError):
    """Raised when a depth value is not strictly positive."""


class GridMapError(FeatLMError):
    """Raised when a grid map is malformed."""


class GridMapFormatError(GridMapError):
    """Raised when a ``.gmap`` file has a bad magic or is truncated."""

    def __init__(self, message: str, *, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ShapeMismatchError(FeatLMError, ValueError):
    """Raised when two maps or arrays that must agree in shape do not."""


class EmptyInputError(FeatLMError, ValueError):
    """Raised when an operation receives an empty list, mask, or trajectory."""


class ResidualError(FeatLMError):
    """Raised when the feature-alignment cost cannot be assembled."""


class DegenerateProblemError(ResidualError):
    """Raised when too few sample points remain valid to constrain the pose."""


class SolverError(FeatLMError):
    """Raised when the Levenberg-Marquardt solver fails."""


class SingularHessianError(SolverError):
    """Raised when the damped normal equations cannot be factorized."""


class LossError(FeatLMError):
    """Raised when a self-supervision loss cannot be computed."""


class SynthError(FeatLMError):
    """Raised when a synthetic scene cannot be generated."""


class InvalidSceneError(SynthError, ValueError):
    """Raised when a scene spec is out of range (resolution, Nyquist, depth sign)."""


class MetricsError(FeatLMError):
    """Raised when an evaluation protocol cannot be applied."""


class RankDeficiencyError(MetricsError):
    """Raised when trajectory positions are too degenerate for a 7DoF alignment."""


class InsufficientLengthError(MetricsError):
    """Raised when a trajectory is shorter than the smallest evaluation segment."""


class PoseFileError(MetricsError):
    """Raised when a KITTI pose file line cannot be parsed."""

    def __init__(self, message: str, *, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


__all__ = [
    "FeatLMError",
    "InvalidArgumentError",
    "ConfigError",
    "LieError",
    "AmbiguousLogarithmError",
    "CameraError",
    "BehindCameraError",
    "InvalidDepthError",
    "GridMapError",
    "GridMapFormatError",
    "ShapeMismatchError",
    "EmptyInputError",
    "ResidualError",
    "DegenerateProblemError",
    "SolverError",
    "SingularHessianError",
    "LossError",
    "SynthError",
    "InvalidSceneError",
    "MetricsError",
    "RankDeficiencyError",
    "InsufficientLengthError",
    "PoseFileError",
]
