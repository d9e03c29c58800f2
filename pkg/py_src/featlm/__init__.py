"""featlm - feature-metric Levenberg-Marquardt pose refinement for self-supervised depth."""

from featlm.aio import async_refine, async_refine_many
from featlm.camera import (
    backproject,
    load_intrinsics,
    project,
    projection_jacobian,
    save_intrinsics,
    transform_jacobian,
)
from featlm.gridmap import bilinear_sample, l2_normalize, load_gridmap, sample_many, save_gridmap
from featlm.lie import compose, exp_se3, inverse, log_se3, orthonormalize
from featlm.losses import (
    min_reprojection_loss,
    photometric_error,
    pose_supervision_loss,
    smoothness_loss,
    total_loss,
    velocity_loss,
    velocity_loss_gradient,
    warp,
)
from featlm.metrics import (
    absolute_trajectory_error,
    apply_similarity,
    depth_metrics,
    odometry_errors,
    read_kitti_poses,
    scale_shift_align,
    scale_std,
    segment_errors,
    sequence_depth_metrics,
    umeyama_align_7dof,
    write_kitti_poses,
)
from featlm.residual import build_problem, evaluate_residuals, robust_eval, select_sample_pixels
from featlm.solver import (
    coupled_depth_gradient,
    directional_depth_derivative,
    irls_reweight,
    lm_step,
    refine_batch,
    refine_pose,
    trace_to_jsonl,
)
from featlm.synth import (
    export_scene,
    generate_scene,
    load_scene_manifest,
    perturb_pose,
    scale_alignment_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "exp_se3",
    "log_se3",
    "compose",
    "inverse",
    "orthonormalize",
    "project",
    "backproject",
    "projection_jacobian",
    "transform_jacobian",
    "load_intrinsics",
    "save_intrinsics",
    "bilinear_sample",
    "sample_many",
    "l2_normalize",
    "load_gridmap",
    "save_gridmap",
    "robust_eval",
    "select_sample_pixels",
    "build_problem",
    "evaluate_residuals",
    "lm_step",
    "irls_reweight",
    "refine_pose",
    "refine_batch",
    "coupled_depth_gradient",
    "directional_depth_derivative",
    "trace_to_jsonl",
    "async_refine",
    "async_refine_many",
    "warp",
    "photometric_error",
    "min_reprojection_loss",
    "smoothness_loss",
    "pose_supervision_loss",
    "velocity_loss",
    "velocity_loss_gradient",
    "total_loss",
    "generate_scene",
    "perturb_pose",
    "export_scene",
    "load_scene_manifest",
    "scale_alignment_experiment",
    "depth_metrics",
    "scale_std",
    "scale_shift_align",
    "sequence_depth_metrics",
    "umeyama_align_7dof",
    "apply_similarity",
    "absolute_trajectory_error",
    "segment_errors",
    "odometry_errors",
    "read_kitti_poses",
    "write_kitti_poses",
]
