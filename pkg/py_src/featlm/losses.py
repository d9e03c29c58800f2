"""Self-supervision losses: view warping, photometric error with
min-reprojection, edge-aware smoothness, pose and velocity supervision.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import uniform_filter

from featlm.camera import Z_MIN, CameraIntrinsics, backproject
from featlm.errors import (
    ConfigError,
    EmptyInputError,
    InvalidArgumentError,
    LossError,
    ShapeMismatchError,
)
from featlm.gridmap import GridMap, sample_many
from featlm.lie import SE3Pose, rotation_angle_between

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    beta_s: float = 1e-3
    beta_v: float = 0.0
    ssim_window: int = 3
    automask: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (self.beta_s >= 0 and self.beta_v >= 0):
            raise ConfigError("loss weights beta_s and beta_v must be non-negative")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be a positive odd size, got {self.ssim_window}")


@dataclass(frozen=True)
class VelocitySample:
    """Measured speed (scene units per second) over a frame gap of ``dt`` seconds."""

    speed: float
    dt: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.speed) and self.speed >= 0):
            raise InvalidArgumentError(f"speed must be non-negative, got {self.speed}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")

    @property
    def distance(self) -> float:
        return self.speed * self.dt


@dataclass(frozen=True)
class LossComponents:
    photometric: float
    smoothness: float = 0.0
    pose: float = 0.0
    velocity: float = 0.0

    def __post_init__(self) -> None:
        values = (self.photometric, self.smoothness, self.pose, self.velocity)
        if not all(math.isfinite(v) for v in values):
            raise LossError(f"loss components must be finite, got {values}")


def warp(
    source: GridMap,
    depth: GridMap,
    pose: SE3Pose,
    k: CameraIntrinsics,
    *,
    z_min: float = Z_MIN,
) -> tuple[GridMap, GridMap]:
    """Synthesize the target view by sampling ``source``.

    Each target pixel is lifted with ``depth``, moved by ``pose`` (target to
    source camera) and projected into ``source``. Returns the warped map and a
    one-channel validity map (1.0 where the sample is in front and in frame);
    invalid pixels hold zeros.
    """
    depth.check_depth()
    h, w = depth.height, depth.width
    if (source.height, source.width) != (h, w):
        raise ShapeMismatchError(
            f"source is {source.height}x{source.width}, depth is {h}x{w}"
        )
    vs, us = np.mgrid[0:h, 0:w]
    pixels = np.stack([us.ravel(), vs.ravel()], axis=-1).astype(np.float64)
    moved = pose.apply(backproject(pixels, depth.plane().ravel(), k))

    in_front = moved[:, 2] > z_min
    z = np.where(in_front, moved[:, 2], 1.0)
    u = k.fx * moved[:, 0] / z + k.cx
    v = k.fy * moved[:, 1] / z + k.cy
    sampled = sample_many(source, u, v)
    valid = in_front & sampled.valid
    values = np.where(valid[:, None], sampled.value, 0.0)
    return (
        GridMap(values.reshape(h, w, source.channels)),
        GridMap(valid.reshape(h, w).astype(np.float64)),
    )


def _ssim(x: FloatArray, y: FloatArray, window: int) -> FloatArray:
    size = (window, window, 1)
    mu_x = uniform_filter(x, size=size, mode="mirror")
    mu_y = uniform_filter(y, size=size, mode="mirror")
    sigma_x = uniform_filter(x * x, size=size, mode="mirror") - mu_x * mu_x
    sigma_y = uniform_filter(y * y, size=size, mode="mirror") - mu_y * mu_y
    sigma_xy = uniform_filter(x * y, size=size, mode="mirror") - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return numerator / denominator


def photometric_error(a: GridMap, b: GridMap, cfg: LossConfig | None = None) -> GridMap:
    """Per-pixel ``(alpha/2)(1 - SSIM) + (1 - alpha)|a - b|``, averaged over channels.

    SSIM uses a square box window with mirrored borders; ``1 - SSIM`` is
    clamped to ``[0, 2]``.
    """
    cfg = cfg or LossConfig()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"photometric inputs differ in shape: {a.shape} vs {b.shape}")
    x = np.asarray(a.data, dtype=np.float64)
    y = np.asarray(b.data, dtype=np.float64)
    l1 = np.abs(x - y)
    if cfg.alpha > 0:
        dssim = np.clip(1.0 - _ssim(x, y, cfg.ssim_window), 0.0, 2.0)
        pe = 0.5 * cfg.alpha * dssim + (1.0 - cfg.alpha) * l1
    else:
        pe = l1
    return GridMap(pe.mean(axis=-1))


def min_reprojection_loss(
    target: GridMap,
    warped: Sequence[GridMap],
    raw: Sequence[GridMap] = (),
    cfg: LossConfig | None = None,
) -> float:
    """Per-pixel minimum error over all candidate source frames, averaged.

    ``raw`` holds the unwarped source frames; with ``cfg.automask`` they join
    the candidates and pixels they win are dropped from the mean (static
    pixels). Ties go to the warped frames. The kept set depends on ``warped``,
    so with raw frames the result can exceed that of a single warped frame.
    """
    cfg = cfg or LossConfig()
    if not warped:
        raise EmptyInputError("min_reprojection_loss needs at least one warped frame")
    candidates = [photometric_error(w, target, cfg).plane() for w in warped]
    if cfg.automask:
        candidates += [photometric_error(r, target, cfg).plane() for r in raw]
    stacked = np.stack(candidates)
    winner = np.argmin(stacked, axis=0)
    minimum = np.min(stacked, axis=0)
    keep = winner < len(warped)
    if not np.any(keep):
        logger.debug("every pixel was auto-masked; photometric loss is zero")
        return 0.0
    return float(np.mean(minimum[keep]))


def smoothness_loss(disparity: GridMap, image: GridMap) -> float:
    """Edge-aware smoothness of the mean-normalized disparity.

    Sum of the means of ``|dx d*| exp(-|dx I|)`` and ``|dy d*| exp(-|dy I|)``
    over forward differences, image gradients averaged over channels.
    """
    d = disparity.plane()
    if (image.height, image.width) != d.shape:
        raise ShapeMismatchError(
            f"image is {image.height}x{image.width}, disparity is {d.shape[0]}x{d.shape[1]}"
        )
    if np.any(d <= 0):
        raise InvalidArgumentError("disparity must be positive")
    d = d / np.mean(d)
    img = np.asarray(image.data, dtype=np.float64)
    grad_dx = np.abs(d[:, :-1] - d[:, 1:])
    grad_dy = np.abs(d[:-1, :] - d[1:, :])
    grad_ix = np.mean(np.abs(img[:, :-1] - img[:, 1:]), axis=-1)
    grad_iy = np.mean(np.abs(img[:-1, :] - img[1:, :]), axis=-1)
    total = 0.0
    if grad_dx.size:
        total += float(np.mean(grad_dx * np.exp(-grad_ix)))
    if grad_dy.size:
        total += float(np.mean(grad_dy * np.exp(-grad_iy)))
    return total


def pose_supervision_loss(p0: SE3Pose, pn: SE3Pose, *, geodesic: bool = False) -> float:
    """Distance between the network pose and the refined pose.

    Element-wise absolute differences of translations and rotation matrices;
    ``geodesic=True`` swaps the rotation term for the rotation angle in radians.
    """
    translation = float(np.sum(np.abs(p0.translation - pn.translation)))
    if geodesic:
        return translation + rotation_angle_between(p0, pn)
    return translation + float(np.sum(np.abs(p0.rotation - pn.rotation)))


def velocity_loss(pose: SE3Pose, vs: VelocitySample) -> float:
    """``| |t| - v dt |``, pinning the translation norm to metric distance."""
    return abs(float(np.linalg.norm(pose.translation)) - vs.distance)


def velocity_loss_gradient(pose: SE3Pose, vs: VelocitySample) -> FloatArray:
    """Gradient of :func:`velocity_loss` w.r.t. the translation; zero at ``t = 0``."""
    t = pose.translation
    norm = float(np.linalg.norm(t))
    if norm == 0.0:
        return np.zeros(3)
    return t / norm * np.sign(norm - vs.distance)


def total_loss(components: LossComponents, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    return (
        components.photometric
        + cfg.beta_s * components.smoothness
        + components.pose
        + cfg.beta_v * components.velocity
    )


__all__ = [
    "LossConfig",
    "LossComponents",
    "VelocitySample",
    "warp",
    "photometric_error",
    "min_reprojection_loss",
    "smoothness_loss",
    "pose_supervision_loss",
    "velocity_loss",
    "velocity_loss_gradient",
    "total_loss",
]
