"""Result, configuration, and data classes for featlm."""

from featlm.camera import CameraIntrinsics
from featlm.cli import RunManifest
from featlm.gridmap import BilinearSample, GridMap
from featlm.lie import SE3Pose, Twist
from featlm.losses import LossComponents, LossConfig, VelocitySample
from featlm.metrics import (
    DepthEvalResult,
    OdometryErrors,
    SegmentError,
    SequenceDepthResult,
    Similarity,
    Trajectory,
)
from featlm.residual import RefinementProblem, ResidualBundle, RobustKernel
from featlm.solver import IterationRecord, RefinementConfig, RefinementTrace
from featlm.synth import (
    RegimeStats,
    ScaleExperimentConfig,
    ScaleExperimentReport,
    ScaleRun,
    SceneManifest,
    SceneSpec,
    SyntheticScene,
)

__all__ = [
    "Twist",
    "SE3Pose",
    "CameraIntrinsics",
    "GridMap",
    "BilinearSample",
    "RobustKernel",
    "RefinementProblem",
    "ResidualBundle",
    "RefinementConfig",
    "IterationRecord",
    "RefinementTrace",
    "LossConfig",
    "LossComponents",
    "VelocitySample",
    "SceneSpec",
    "SyntheticScene",
    "SceneManifest",
    "ScaleExperimentConfig",
    "ScaleExperimentReport",
    "ScaleRun",
    "RegimeStats",
    "DepthEvalResult",
    "SequenceDepthResult",
    "Trajectory",
    "Similarity",
    "SegmentError",
    "OdometryErrors",
    "RunManifest",
]
