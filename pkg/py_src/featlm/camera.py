"""Pinhole projection, backprojection, and the geometric Jacobian blocks.

Pixel coordinates are continuous with ``(0, 0)`` at the center of the top-left
texel, which is the convention :mod:`featlm.gridmap` samples with.
Every function accepts a single point/pixel or a stack with a leading axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from featlm.errors import BehindCameraError, InvalidArgumentError, InvalidDepthError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

Z_MIN = 1e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics ``K`` plus the image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise InvalidArgumentError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 2 or self.height < 2:
            raise InvalidArgumentError(
                f"image must be at least 2x2, got {self.width}x{self.height}"
            )

    def matrix(self) -> FloatArray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _points(p: ArrayLike) -> FloatArray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise InvalidArgumentError(f"points must have a trailing axis of 3, got {arr.shape}")
    return arr


def _check_in_front(z: FloatArray, z_min: float) -> None:
    if np.any(z <= z_min):
        worst = float(np.min(z))
        raise BehindCameraError(f"point depth {worst:.6g} is not beyond z_min={z_min}")


def project(p: ArrayLike, k: CameraIntrinsics, *, z_min: float = Z_MIN) -> FloatArray:
    """Project camera-frame points to pixels: ``u = fx*x/z + cx``, ``v = fy*y/z + cy``."""
    pts = _points(p)
    z = pts[..., 2]
    _check_in_front(z, z_min)
    u = k.fx * pts[..., 0] / z + k.cx
    v = k.fy * pts[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def backproject(px: ArrayLike, depth: ArrayLike, k: CameraIntrinsics) -> FloatArray:
    """Lift pixels to camera-frame points at the given depth (``z = depth``)."""
    pix = np.asarray(px, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if pix.shape[-1] != 2:
        raise InvalidArgumentError(f"pixels must have a trailing axis of 2, got {pix.shape}")
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise InvalidDepthError(f"depth must be positive, got min {float(np.min(d)):.6g}")
    x = (pix[..., 0] - k.cx) / k.fx * d
    y = (pix[..., 1] - k.cy) / k.fy * d
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def projection_jacobian(p: ArrayLike, k: CameraIntrinsics, *, z_min: float = Z_MIN) -> FloatArray:
    """Derivative of the projected pixel w.r.t. the camera-frame point, shape ``(..., 2, 3)``."""
    pts = _points(p)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    _check_in_front(z, z_min)
    inv_z = 1.0 / z
    zeros = np.zeros_like(z)
    row_u = np.stack([k.fx * inv_z, zeros, -k.fx * x * inv_z**2], axis=-1)
    row_v = np.stack([zeros, k.fy * inv_z, -k.fy * y * inv_z**2], axis=-1)
    return np.stack([row_u, row_v], axis=-2)


def transform_jacobian(p_query: ArrayLike) -> FloatArray:
    """``d(exp(twist) * s)/d twist`` at zero: ``[-[s]x | I3]``, shape ``(..., 3, 6)``."""
    s = _points(p_query)
    if not np.all(np.isfinite(s)):
        raise InvalidArgumentError("point is not finite")
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    zeros = np.zeros_like(x)
    ones = np.ones_like(x)
    # rows of -[s]x followed by the identity block
    row0 = np.stack([zeros, z, -y, ones, zeros, zeros], axis=-1)
    row1 = np.stack([-z, zeros, x, zeros, ones, zeros], axis=-1)
    row2 = np.stack([y, -x, zeros, zeros, zeros, ones], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def load_intrinsics(path: str | PathLike[str]) -> CameraIntrinsics:
    """Read ``fx fy cx cy width height`` from a one-line text file."""
    text = Path(path).read_text()
    tokens = text.split()
    if len(tokens) != 6:
        raise InvalidArgumentError(f"{path}: expected 6 values, got {len(tokens)}")
    try:
        fx, fy, cx, cy = (float(t) for t in tokens[:4])
        width, height = int(tokens[4]), int(tokens[5])
    except ValueError as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from exc
    logger.debug("loaded intrinsics from %s", path)
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def save_intrinsics(k: CameraIntrinsics, path: str | PathLike[str]) -> None:
    Path(path).write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")


__all__ = [
    "CameraIntrinsics",
    "Z_MIN",
    "project",
    "backproject",
    "projection_jacobian",
    "transform_jacobian",
    "load_intrinsics",
    "save_intrinsics",
]
