"""Depth and visual-odometry evaluation.

Depth: the seven standard error/accuracy metrics with optional median
scaling, scale-consistency statistics and per-sequence scale-and-shift
alignment. Odometry: 7DoF Umeyama alignment, RMSE-ATE, and KITTI-style
segment errors, plus the KITTI pose text format.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from featlm.errors import (
    EmptyInputError,
    InsufficientLengthError,
    InvalidArgumentError,
    PoseFileError,
    RankDeficiencyError,
    ShapeMismatchError,
)
from featlm.gridmap import GridMap
from featlm.lie import SE3Pose, compose, inverse, rotation_angle

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

MIN_EVAL_DEPTH = 1e-3
DEPTH_CAP = 80.0
KITTI_SEGMENTS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
SEGMENT_STEP = 10


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    scale_factor: float
    n_valid: int

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class SequenceDepthResult:
    metrics: DepthEvalResult
    scale: float
    shift: float


def _depth_arrays(
    pred: GridMap | ArrayLike, gt: GridMap | ArrayLike, mask: ArrayLike | None
) -> tuple[FloatArray, FloatArray]:
    p = pred.plane() if isinstance(pred, GridMap) else np.asarray(pred, dtype=np.float64)
    g = gt.plane() if isinstance(gt, GridMap) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"prediction is {p.shape}, ground truth is {g.shape}")
    valid = g > 0
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != g.shape:
            raise ShapeMismatchError(f"mask is {m.shape}, ground truth is {g.shape}")
        valid &= m
    if not np.any(valid):
        raise EmptyInputError("no valid ground-truth pixels under the mask")
    return p[valid], g[valid]


def _errors(
    pred: FloatArray, gt: FloatArray, scale_factor: float, cap: float
) -> DepthEvalResult:
    p = np.clip(pred, MIN_EVAL_DEPTH, cap)
    g = np.clip(gt, MIN_EVAL_DEPTH, cap)
    thresh = np.maximum(g / p, p / g)
    diff = g - p
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25**2)),
        delta3=float(np.mean(thresh < 1.25**3)),
        scale_factor=scale_factor,
        n_valid=int(g.size),
    )


def depth_metrics(
    pred: GridMap | ArrayLike,
    gt: GridMap | ArrayLike,
    mask: ArrayLike | None = None,
    *,
    use_median_scaling: bool = True,
    cap: float = DEPTH_CAP,
) -> DepthEvalResult:
    """Abs Rel, Sq Rel, RMSE, RMSE log and the three delta accuracies.

    Pixels count when ``gt > 0`` and ``mask`` is set. With median scaling the
    prediction is multiplied by ``median(gt) / median(pred)`` first; both maps
    are then clamped to ``[1e-3, cap]``.
    """
    if not cap > MIN_EVAL_DEPTH:
        raise InvalidArgumentError(f"cap must exceed {MIN_EVAL_DEPTH}, got {cap}")
    p, g = _depth_arrays(pred, gt, mask)
    scale = 1.0
    if use_median_scaling:
        median_pred = float(np.median(p))
        if median_pred <= 0:
            raise InvalidArgumentError("median prediction must be positive for median scaling")
        scale = float(np.median(g)) / median_pred
        p = p * scale
    return _errors(p, g, scale, cap)


def scale_std(
    per_frame_scales: Sequence[float] | ArrayLike,
    *,
    normalize: bool = False,
    reference: Literal["mean", "median"] = "mean",
) -> float:
    """Population std of scale factors, optionally after dividing by their mean or median."""
    s = np.asarray(per_frame_scales, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise EmptyInputError("scale_std needs at least one scale factor")
    if normalize:
        if reference not in ("mean", "median"):
            raise InvalidArgumentError(f"unknown reference {reference!r}")
        ref = float(np.mean(s)) if reference == "mean" else float(np.median(s))
        if ref == 0:
            raise InvalidArgumentError("cannot normalize scales with a zero reference")
        s = s / ref
    return float(np.std(s))


def scale_shift_align(
    pred: GridMap | ArrayLike, gt: GridMap | ArrayLike, mask: ArrayLike | None = None
) -> tuple[float, float]:
    """Least-squares ``(scale, shift)`` with ``gt ~ scale * pred + shift``."""
    p, g = _depth_arrays(pred, gt, mask)
    return _fit_scale_shift(p, g)


def _fit_scale_shift(p: FloatArray, g: FloatArray) -> tuple[float, float]:
    if p.size < 2 or np.ptp(p) == 0:
        raise RankDeficiencyError("scale-and-shift fit needs at least two distinct predictions")
    design = np.stack([p, np.ones_like(p)], axis=-1)
    (scale, shift), *_ = np.linalg.lstsq(design, g, rcond=None)
    return float(scale), float(shift)


def sequence_depth_metrics(
    preds: Sequence[GridMap | ArrayLike],
    gts: Sequence[GridMap | ArrayLike],
    masks: Sequence[ArrayLike | None] | None = None,
    *,
    cap: float = DEPTH_CAP,
) -> SequenceDepthResult:
    """Metrics of a whole sequence after one shared scale-and-shift alignment.

    The per-sequence scales of several sequences feed
    ``scale_std(scales, normalize=True)``.
    """
    if not preds:
        raise EmptyInputError("sequence has no frames")
    if len(preds) != len(gts) or (masks is not None and len(masks) != len(preds)):
        raise ShapeMismatchError("preds, gts and masks must have the same number of frames")
    frame_masks = masks if masks is not None else [None] * len(preds)
    pairs = [_depth_arrays(p, g, m) for p, g, m in zip(preds, gts, frame_masks)]
    p = np.concatenate([pair[0] for pair in pairs])
    g = np.concatenate([pair[1] for pair in pairs])
    scale, shift = _fit_scale_shift(p, g)
    return SequenceDepthResult(_errors(scale * p + shift, g, scale, cap), scale, shift)


@dataclass(frozen=True)
class Trajectory:
    """Camera-to-world poses in time order, with optional timestamps."""

    poses: tuple[SE3Pose, ...]
    timestamps: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", tuple(self.poses))
        if self.timestamps is not None:
            stamps = tuple(float(t) for t in self.timestamps)
            if len(stamps) != len(self.poses):
                raise ShapeMismatchError("one timestamp per pose is required")
            object.__setattr__(self, "timestamps", stamps)

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[SE3Pose]:
        return iter(self.poses)

    def __getitem__(self, index: int) -> SE3Pose:
        return self.poses[index]

    def positions(self) -> FloatArray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def path_lengths(self) -> FloatArray:
        """Cumulative arc length at every pose, starting at 0."""
        steps = np.linalg.norm(np.diff(self.positions(), axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass(frozen=True, eq=False)
class Similarity:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: FloatArray
    translation: FloatArray

    def apply(self, points: ArrayLike) -> FloatArray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation


def _as_points(traj: Trajectory | ArrayLike) -> FloatArray:
    if isinstance(traj, Trajectory):
        return traj.positions()
    pts = np.asarray(traj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatchError(f"expected an (N, 3) array of positions, got {pts.shape}")
    return pts


def umeyama_align_7dof(est: Trajectory | ArrayLike, gt: Trajectory | ArrayLike) -> Similarity:
    """Closed-form similarity minimizing ``sum |gt_i - (s R est_i + t)|^2``."""
    data = _as_points(est)
    model = _as_points(gt)
    if data.shape != model.shape:
        raise ShapeMismatchError(f"trajectories differ in length: {len(data)} vs {len(model)}")
    if len(data) < 3:
        raise InsufficientLengthError(f"7DoF alignment needs at least 3 poses, got {len(data)}")

    mu_model = model.mean(axis=0)
    mu_data = data.mean(axis=0)
    model_c = model - mu_model
    data_c = data - mu_data
    n = len(data)
    correlation = model_c.T @ data_c / n
    sigma2 = float(np.sum(data_c**2) / n)
    u, d, vt = np.linalg.svd(correlation)
    if sigma2 == 0.0 or d[1] < 1e-12 * max(d[0], 1e-300):
        raise RankDeficiencyError("positions are collinear or coincident; alignment is ambiguous")

    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / sigma2)
    translation = mu_model - scale * rotation @ mu_data
    return Similarity(scale, rotation, translation)


def apply_similarity(traj: Trajectory, sim: Similarity) -> Trajectory:
    """Move a camera-to-world trajectory into the aligned frame."""
    poses = tuple(
        SE3Pose(sim.rotation @ p.rotation, sim.apply(p.translation)) for p in traj.poses
    )
    return Trajectory(poses, traj.timestamps)


def absolute_trajectory_error(est: Trajectory, gt: Trajectory, *, align: bool = True) -> float:
    """RMSE of position differences, after 7DoF alignment unless ``align=False``."""
    if len(est) != len(gt):
        raise ShapeMismatchError(f"trajectories differ in length: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise EmptyInputError("trajectories are empty")
    positions = est.positions()
    if align:
        positions = umeyama_align_7dof(est, gt).apply(positions)
    residual = positions - gt.positions()
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


@dataclass(frozen=True)
class SegmentError:
    first_frame: int
    last_frame: int
    length: float
    arc_length: float
    t_err: float
    r_err: float


@dataclass(frozen=True)
class OdometryErrors:
    t_err_pct: float
    r_err_deg_per_100m: float
    segments: list[SegmentError] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "t_err_pct": self.t_err_pct,
            "r_err_deg_per_100m": self.r_err_deg_per_100m,
            "segments": len(self.segments),
        }


def _last_frame(dist: FloatArray, first: int, length: float) -> int:
    reached = np.nonzero(dist[first:] >= dist[first] + length)[0]
    return int(first + reached[0]) if reached.size else -1


def segment_errors(
    est: Trajectory,
    gt: Trajectory,
    segment_lengths: Sequence[float] = KITTI_SEGMENTS,
    *,
    step: int = SEGMENT_STEP,
) -> list[SegmentError]:
    """Relative-pose errors over every ``(start, length)`` segment.

    Starts every ``step`` frames; a segment ends at the first frame whose gt
    arc length from the start reaches ``length``. ``t_err`` is the translation
    error per unit of gt arc length and ``r_err`` radians per unit length.
    """
    if len(est) != len(gt):
        raise ShapeMismatchError(f"trajectories differ in length: {len(est)} vs {len(gt)}")
    if not segment_lengths or any(length <= 0 for length in segment_lengths):
        raise InvalidArgumentError("segment lengths must be positive")
    if step < 1:
        raise InvalidArgumentError(f"step must be >= 1, got {step}")
    if len(gt) < 2:
        raise InsufficientLengthError("odometry errors need at least 2 poses")
    dist = gt.path_lengths()
    if dist[-1] < min(segment_lengths):
        raise InsufficientLengthError(
            f"gt path length {dist[-1]:.6g} is shorter than the smallest segment "
            f"{min(segment_lengths):.6g}"
        )

    out = []
    for first in range(0, len(gt), step):
        for length in segment_lengths:
            last = _last_frame(dist, first, length)
            if last < 0:
                continue
            delta_gt = compose(inverse(gt[first]), gt[last])
            delta_est = compose(inverse(est[first]), est[last])
            error = compose(inverse(delta_est), delta_gt)
            arc = float(dist[last] - dist[first])
            out.append(
                SegmentError(
                    first_frame=first,
                    last_frame=last,
                    length=float(length),
                    arc_length=arc,
                    t_err=float(np.linalg.norm(error.translation)) / arc,
                    r_err=rotation_angle(error.rotation) / arc,
                )
            )
    return out


def odometry_errors(
    est: Trajectory,
    gt: Trajectory,
    segment_lengths: Sequence[float] = KITTI_SEGMENTS,
    *,
    step: int = SEGMENT_STEP,
) -> OdometryErrors:
    """Average translation error in percent and rotation error in degrees per 100 units."""
    segments = segment_errors(est, gt, segment_lengths, step=step)
    if not segments:
        raise InsufficientLengthError("no complete segment fits in the trajectory")
    t_err = float(np.mean([s.t_err for s in segments]))
    r_err = float(np.mean([s.r_err for s in segments]))
    logger.debug("evaluated %d odometry segments", len(segments))
    return OdometryErrors(
        t_err_pct=100.0 * t_err,
        r_err_deg_per_100m=100.0 * math.degrees(r_err),
        segments=segments,
    )


def read_kitti_poses(path: str | PathLike[str]) -> Trajectory:
    """Read 12 row-major ``[R|t]`` floats per line; blank lines are skipped."""
    poses = []
    text = Path(path).read_text()
    for number, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise PoseFileError(f"expected 12 values, got {len(tokens)}", line=number)
        try:
            values = np.array([float(t) for t in tokens]).reshape(3, 4)
            poses.append(SE3Pose.from_matrix(values, repair=True))
        except ValueError as exc:
            raise PoseFileError(str(exc), line=number) from exc
    logger.debug("read %d poses from %s", len(poses), path)
    return Trajectory(tuple(poses))


def format_kitti_pose(pose: SE3Pose) -> str:
    return " ".join(f"{v:.17g}" for v in pose.matrix()[:3, :].ravel())


def write_kitti_poses(traj: Trajectory | Sequence[SE3Pose], path: str | PathLike[str]) -> None:
    lines = [format_kitti_pose(p) + "\n" for p in traj]
    Path(path).write_text("".join(lines))


__all__ = [
    "DepthEvalResult",
    "SequenceDepthResult",
    "Trajectory",
    "Similarity",
    "SegmentError",
    "OdometryErrors",
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
    "format_kitti_pose",
]
