"""SE(3) and so(3) algebra used for every pose update.

Twists are ordered ``[rotation | translation]`` project-wide and updates are
applied on the left: ``P' = exp(twist) * P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

from featlm.errors import AmbiguousLogarithmError, InvalidArgumentError

FloatArray = NDArray[np.float64]

SMALL_ANGLE = 1e-8
# compose() re-projects onto SO(3) once drift exceeds this
ORTHONORMAL_DRIFT = 1e-7
# constructor tolerance; KITTI files print ~7 significant digits
ROTATION_TOL = 1e-6
LOG_BRANCH_MARGIN = 1e-6

_EYE3 = np.eye(3)


def _frozen(array: FloatArray) -> FloatArray:
    array.setflags(write=False)
    return array


def hat(w: ArrayLike) -> FloatArray:
    """Skew-symmetric matrix ``[w]x`` such that ``hat(w) @ p == cross(w, p)``."""
    x, y, z = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: ArrayLike) -> FloatArray:
    m = np.asarray(m, dtype=np.float64)
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def orthonormality_error(rotation: FloatArray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - _EYE3)))


def orthonormalize(rotation: ArrayLike) -> FloatArray:
    """Nearest rotation matrix via the polar decomposition."""
    unitary, _ = polar(np.asarray(rotation, dtype=np.float64))
    if np.linalg.det(unitary) < 0:
        raise InvalidArgumentError("matrix is a reflection, not a rotation")
    return np.asarray(unitary, dtype=np.float64)


def rotation_angle(rotation: ArrayLike) -> float:
    """Geodesic angle of a rotation matrix in radians, in ``[0, pi]``."""
    r = np.asarray(rotation, dtype=np.float64)
    sin_part = 0.5 * float(np.linalg.norm(vee(r - r.T)))
    cos_part = 0.5 * (float(np.trace(r)) - 1.0)
    return math.atan2(sin_part, cos_part)


@dataclass(frozen=True, eq=False)
class Twist:
    """Tangent-space increment: axis-angle ``rotation`` (radians) and ``translation``."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        for name in ("rotation", "translation"):
            value = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if value.shape != (3,):
                raise InvalidArgumentError(f"twist {name} must have 3 entries, got {value.size}")
            if not np.all(np.isfinite(value)):
                raise InvalidArgumentError(f"twist {name} is not finite: {value}")
            object.__setattr__(self, name, _frozen(value))

    @classmethod
    def zero(cls) -> Twist:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vector: ArrayLike) -> Twist:
        v = np.asarray(vector, dtype=np.float64).reshape(-1)
        if v.shape != (6,):
            raise InvalidArgumentError(f"twist vector must have 6 entries, got {v.size}")
        return cls(v[:3], v[3:])

    def as_vector(self) -> FloatArray:
        return np.concatenate([self.rotation, self.translation])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))

    def __repr__(self) -> str:
        return f"Twist(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform ``p -> rotation @ p + translation``."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError(
                f"pose needs a 3x3 rotation and 3-vector translation, got {r.shape} and {t.shape}"
            )
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose entries are not finite")
        drift = orthonormality_error(r)
        if drift > ROTATION_TOL or np.linalg.det(r) <= 0:
            raise InvalidArgumentError(f"rotation is not orthonormal (|R^T R - I| = {drift:.3g})")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> SE3Pose:
        return cls(_EYE3.copy(), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike, *, repair: bool = False) -> SE3Pose:
        """Build from a 3x4 or 4x4 ``[R|t]`` matrix.

        With ``repair=True`` a rotation block that drifted by less than 1e-3 is
        projected back onto SO(3) instead of being rejected.
        """
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise InvalidArgumentError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        rotation = m[:3, :3]
        if repair and ORTHONORMAL_DRIFT < orthonormality_error(rotation) < 1e-3:
            rotation = orthonormalize(rotation)
        return cls(rotation, m[:3, 3])

    def matrix(self) -> FloatArray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: ArrayLike) -> FloatArray:
        """Transform a point or a stack of points with shape ``(..., 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        return rotation_angle(self.rotation)

    def allclose(self, other: SE3Pose, *, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def __repr__(self) -> str:
        r, t = self.rotation.tolist(), self.translation.tolist()
        return f"SE3Pose(rotation={r}, translation={t})"


TwistLike = Union[Twist, ArrayLike]


def _as_twist(twist: TwistLike) -> Twist:
    return twist if isinstance(twist, Twist) else Twist.from_vector(twist)


def _so3_terms(w: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Rotation matrix, left Jacobian and ``[w]x`` for an axis-angle vector."""
    theta = float(np.linalg.norm(w))
    w_hat = hat(w)
    w_hat2 = w_hat @ w_hat
    if theta < SMALL_ANGLE:
        rotation = _EYE3 + w_hat + 0.5 * w_hat2
        left_jacobian = _EYE3 + 0.5 * w_hat + w_hat2 / 6.0
    else:
        sin_t, cos_t = math.sin(theta), math.cos(theta)
        a = sin_t / theta
        b = (1.0 - cos_t) / theta**2
        c = (theta - sin_t) / theta**3
        rotation = _EYE3 + a * w_hat + b * w_hat2
        left_jacobian = _EYE3 + b * w_hat + c * w_hat2
    return rotation, left_jacobian, w_hat


def exp_se3(twist: TwistLike) -> SE3Pose:
    """Exponential map: Rodrigues rotation plus the left Jacobian on the translation."""
    tw = _as_twist(twist)
    rotation, left_jacobian, _ = _so3_terms(tw.rotation)
    return SE3Pose(rotation, left_jacobian @ tw.translation)


def log_se3(pose: SE3Pose) -> Twist:
    """Logarithm map, the inverse of :func:`exp_se3` for angles below ``pi``."""
    w = Rotation.from_matrix(np.array(pose.rotation)).as_rotvec()
    theta = float(np.linalg.norm(w))
    if theta > math.pi - LOG_BRANCH_MARGIN:
        raise AmbiguousLogarithmError(
            f"rotation angle {theta:.9f} rad is within {LOG_BRANCH_MARGIN} of pi"
        )
    w_hat = hat(w)
    w_hat2 = w_hat @ w_hat
    if theta < SMALL_ANGLE:
        v_inv = _EYE3 - 0.5 * w_hat + w_hat2 / 12.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta**2
        v_inv = _EYE3 - 0.5 * w_hat + (1.0 - a / (2.0 * b)) / theta**2 * w_hat2
    return Twist(w, v_inv @ pose.translation)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    rotation = a.rotation @ b.rotation
    if orthonormality_error(rotation) > ORTHONORMAL_DRIFT:
        rotation = orthonormalize(rotation)
    return SE3Pose(rotation, a.rotation @ b.translation + a.translation)


def inverse(a: SE3Pose) -> SE3Pose:
    rt = a.rotation.T
    return SE3Pose(rt, -rt @ a.translation)


def rotation_angle_between(a: SE3Pose, b: SE3Pose) -> float:
    """Geodesic angle between the rotations of two poses, in radians."""
    return rotation_angle(a.rotation.T @ b.rotation)


__all__ = [
    "Twist",
    "SE3Pose",
    "hat",
    "vee",
    "exp_se3",
    "log_se3",
    "compose",
    "inverse",
    "orthonormalize",
    "orthonormality_error",
    "rotation_angle",
    "rotation_angle_between",
]
