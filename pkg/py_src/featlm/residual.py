"""Feature-alignment cost, residuals, Jacobians and per-point weights.

For every sampled reference pixel the reference depth lifts it to 3D, the
candidate pose moves it into the query camera, and the query feature map is
sampled where it projects. The residual is ``f_query - f_ref`` and its
Jacobian w.r.t. a left twist is the chain
``dF/di * di/ds * ds/dtwist``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from featlm.camera import (
    Z_MIN,
    CameraIntrinsics,
    backproject,
    projection_jacobian,
    transform_jacobian,
)
from featlm.errors import (
    DegenerateProblemError,
    InvalidArgumentError,
    InvalidDepthError,
    ShapeMismatchError,
)
from featlm.gridmap import GridMap, l2_normalize, sample_many
from featlm.lie import SE3Pose

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

KernelKind = Literal["huber", "tukey", "cauchy", "squared"]
MIN_POINTS = 6


@dataclass(frozen=True)
class RobustKernel:
    """Robust loss ``rho`` of the squared residual norm.

    All kernels are normalized so that ``rho(r2) ~ r2`` near zero
    (``rho'(0) == 1``).
    """

    kind: KernelKind = "huber"
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("huber", "tukey", "cauchy", "squared"):
            raise InvalidArgumentError(f"unknown robust kernel {self.kind!r}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError(f"kernel scale must be positive, got {self.scale}")

    @classmethod
    def parse(cls, text: str) -> RobustKernel:
        """Parse ``"kind"`` or ``"kind:scale"``, e.g. ``"huber:1.0"``."""
        kind, _, scale = text.partition(":")
        try:
            return cls(kind.strip(), float(scale) if scale else 1.0)  # type: ignore[arg-type]
        except ValueError as exc:
            raise InvalidArgumentError(f"bad kernel spec {text!r}: {exc}") from exc

    def evaluate(self, r2: ArrayLike) -> tuple[FloatArray, FloatArray]:
        """Vectorized ``(rho, rho')`` for non-negative squared norms."""
        x = np.asarray(r2, dtype=np.float64)
        if np.any(x < 0) or not np.all(np.isfinite(x)):
            raise InvalidArgumentError("squared residual norms must be finite and non-negative")
        s2 = self.scale * self.scale
        if self.kind == "squared":
            return x.copy(), np.ones_like(x)
        if self.kind == "huber":
            inlier = x <= s2
            root = np.sqrt(np.where(inlier, s2, x))
            rho = np.where(inlier, x, 2.0 * self.scale * root - s2)
            rho_prime = np.where(inlier, 1.0, self.scale / root)
            return rho, rho_prime
        if self.kind == "tukey":
            inlier = x <= s2
            t = np.where(inlier, 1.0 - x / s2, 0.0)
            rho = np.where(inlier, s2 / 3.0 * (1.0 - t**3), s2 / 3.0)
            return rho, t**2
        # cauchy
        return s2 * np.log1p(x / s2), 1.0 / (1.0 + x / s2)

    def __str__(self) -> str:
        return f"{self.kind}:{self.scale!r}"


def robust_eval(kernel: RobustKernel, r2: float) -> tuple[float, float]:
    if r2 < 0:
        raise InvalidArgumentError(f"squared residual norm must be non-negative, got {r2}")
    rho, rho_prime = kernel.evaluate(np.array([r2]))
    return float(rho[0]), float(rho_prime[0])


def select_sample_pixels(
    height: int, width: int, count: int, *, seed: int = 0, margin: int = 0
) -> FloatArray:
    """Pick ``count`` integer pixels from a jittered uniform grid.

    The frame (minus ``margin``) is tiled into at least ``count`` cells, one
    pixel is drawn per cell, and ``count`` cells are kept; all draws come from
    ``seed``. Returns ``(count, 2)`` ``(u, v)`` coordinates sorted row-major.
    """
    if count < 1:
        raise InvalidArgumentError(f"need at least one sample point, got {count}")
    u_lo, v_lo = margin, margin
    span_u, span_v = width - 2 * margin, height - 2 * margin
    if span_u < 1 or span_v < 1:
        raise InvalidArgumentError(f"margin {margin} leaves no pixels in a {width}x{height} map")
    if count >= span_u * span_v:
        vs, us = np.mgrid[v_lo : v_lo + span_v, u_lo : u_lo + span_u]
        return np.stack([us.ravel(), vs.ravel()], axis=-1).astype(np.float64)

    rng = np.random.default_rng(seed)
    cols = max(1, min(span_u, math.ceil(math.sqrt(count * span_u / span_v))))
    rows = max(1, min(span_v, math.ceil(count / cols)))
    while rows * cols < count:
        cols = min(span_u, cols + 1)
        rows = min(span_v, math.ceil(count / cols))
    u_edges = np.linspace(0, span_u, cols + 1).astype(np.intp)
    v_edges = np.linspace(0, span_v, rows + 1).astype(np.intp)
    cell_u0, cell_v0 = np.meshgrid(u_edges[:-1], v_edges[:-1])
    cell_u1, cell_v1 = np.meshgrid(u_edges[1:], v_edges[1:])
    us = rng.integers(cell_u0.ravel(), np.maximum(cell_u1.ravel(), cell_u0.ravel() + 1))
    vs = rng.integers(cell_v0.ravel(), np.maximum(cell_v1.ravel(), cell_v0.ravel() + 1))
    keep = np.sort(rng.choice(us.size, size=count, replace=False))
    return np.stack([us[keep] + u_lo, vs[keep] + v_lo], axis=-1).astype(np.float64)


@dataclass(frozen=True, eq=False)
class RefinementProblem:
    """One reference/query alignment instance.

    ``depth_values`` optionally overrides the reference depth sampled at each
    sample pixel; the coupled depth gradient perturbs it.
    """

    ref_feature: GridMap
    query_feature: GridMap
    ref_confidence: GridMap
    query_confidence: GridMap
    ref_depth: GridMap
    intrinsics: CameraIntrinsics
    sample_pixels: FloatArray
    depth_values: FloatArray | None = field(default=None)

    def __post_init__(self) -> None:
        shape = (self.ref_feature.height, self.ref_feature.width)
        maps = {
            "query_feature": self.query_feature,
            "ref_confidence": self.ref_confidence,
            "query_confidence": self.query_confidence,
            "ref_depth": self.ref_depth,
        }
        for name, grid in maps.items():
            if (grid.height, grid.width) != shape:
                raise ShapeMismatchError(
                    f"{name} is {grid.height}x{grid.width}, reference features are "
                    f"{shape[0]}x{shape[1]}"
                )
        if self.query_feature.channels != self.ref_feature.channels:
            raise ShapeMismatchError(
                f"feature channels differ: {self.ref_feature.channels} vs "
                f"{self.query_feature.channels}"
            )
        self.ref_confidence.check_confidence()
        self.query_confidence.check_confidence()
        self.ref_depth.check_depth()
        if (self.intrinsics.width, self.intrinsics.height) != (shape[1], shape[0]):
            raise ShapeMismatchError("intrinsics image size does not match the maps")

        pixels = np.array(self.sample_pixels, dtype=np.float64).reshape(-1, 2)
        if pixels.shape[0] < MIN_POINTS:
            raise InvalidArgumentError(
                f"need at least {MIN_POINTS} sample points, got {pixels.shape[0]}"
            )
        u, v = pixels[:, 0], pixels[:, 1]
        if np.any(u < 0) or np.any(u > shape[1] - 1) or np.any(v < 0) or np.any(v > shape[0] - 1):
            raise InvalidArgumentError("sample pixels must lie inside the reference frame")
        pixels.setflags(write=False)
        object.__setattr__(self, "sample_pixels", pixels)

        if self.depth_values is not None:
            depths = np.array(self.depth_values, dtype=np.float64).reshape(-1)
            if depths.shape != (pixels.shape[0],):
                raise ShapeMismatchError("depth_values needs one entry per sample pixel")
            if np.any(~np.isfinite(depths)) or np.any(depths <= 0):
                raise InvalidDepthError("depth_values must be positive")
            depths.setflags(write=False)
            object.__setattr__(self, "depth_values", depths)

    @property
    def num_points(self) -> int:
        return int(self.sample_pixels.shape[0])

    def sample_depths(self) -> FloatArray:
        if self.depth_values is not None:
            return self.depth_values
        px = self.sample_pixels
        return sample_many(self.ref_depth, px[:, 0], px[:, 1]).value[:, 0]


def build_problem(
    ref_feature: GridMap,
    query_feature: GridMap,
    ref_depth: GridMap,
    intrinsics: CameraIntrinsics,
    *,
    ref_confidence: GridMap | None = None,
    query_confidence: GridMap | None = None,
    num_points: int = 512,
    seed: int = 0,
    use_confidence: bool = True,
    normalize_features: bool = False,
) -> RefinementProblem:
    """Assemble a problem, drawing sample pixels with :func:`select_sample_pixels`.

    Missing confidence maps, or ``use_confidence=False``, mean uniform confidence.
    """
    ones = GridMap(np.ones((ref_feature.height, ref_feature.width, 1), dtype=np.float32))
    if not use_confidence or ref_confidence is None:
        ref_confidence = ones
    if not use_confidence or query_confidence is None:
        query_confidence = ones
    if normalize_features:
        ref_feature, query_feature = l2_normalize(ref_feature), l2_normalize(query_feature)
    pixels = select_sample_pixels(ref_feature.height, ref_feature.width, num_points, seed=seed)
    return RefinementProblem(
        ref_feature=ref_feature,
        query_feature=query_feature,
        ref_confidence=ref_confidence,
        query_confidence=query_confidence,
        ref_depth=ref_depth,
        intrinsics=intrinsics,
        sample_pixels=pixels,
    )


@dataclass(frozen=True, eq=False)
class ResidualBundle:
    """Stacked residuals of one problem at one pose.

    ``weights`` is the diagonal of ``W`` (confidence times ``rho'``), zero at
    invalid points; ``rho`` and ``confidence`` are kept for reweighting.
    """

    deltas: FloatArray
    jacobians: FloatArray
    weights: FloatArray
    validity: NDArray[np.bool_]
    cost: float
    rho: FloatArray
    confidence: FloatArray

    @property
    def num_valid(self) -> int:
        return int(np.count_nonzero(self.validity))

    @property
    def squared_norms(self) -> FloatArray:
        return np.einsum("mc,mc->m", self.deltas, self.deltas)


def evaluate_residuals(
    problem: RefinementProblem,
    pose: SE3Pose,
    kernel: RobustKernel,
    *,
    divide_by_m_total: bool = False,
    z_min: float = Z_MIN,
) -> ResidualBundle:
    """Residuals, Jacobians, weights and the cost ``E`` of ``pose``.

    ``E`` averages ``c_ref * c_query * rho(|delta|^2)`` over valid points, or
    over all ``M`` points with ``divide_by_m_total``.
    """
    k = problem.intrinsics
    px = problem.sample_pixels
    m = problem.num_points

    ref = sample_many(problem.ref_feature, px[:, 0], px[:, 1]).value
    c_ref = sample_many(problem.ref_confidence, px[:, 0], px[:, 1]).value[:, 0]
    points_ref = backproject(px, problem.sample_depths(), k)
    points_query = pose.apply(points_ref)

    in_front = points_query[:, 2] > z_min
    # park points behind the camera somewhere harmless; they are masked below
    safe = np.where(in_front[:, None], points_query, np.array([0.0, 0.0, 1.0]))
    proj_jac = projection_jacobian(safe, k, z_min=z_min)
    pixels = np.stack(
        [k.fx * safe[:, 0] / safe[:, 2] + k.cx, k.fy * safe[:, 1] / safe[:, 2] + k.cy], axis=-1
    )
    query = sample_many(problem.query_feature, pixels[:, 0], pixels[:, 1])
    c_query = sample_many(problem.query_confidence, pixels[:, 0], pixels[:, 1]).value[:, 0]
    valid = in_front & query.valid

    deltas = np.where(valid[:, None], query.value - ref, 0.0)
    jacobians = query.grad @ proj_jac @ transform_jacobian(safe)
    jacobians[~valid] = 0.0

    confidence = np.where(valid, c_ref * c_query, 0.0)
    rho, rho_prime = kernel.evaluate(np.einsum("mc,mc->m", deltas, deltas))
    weights = confidence * rho_prime

    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise DegenerateProblemError(
            f"all {m} sample points reproject behind the camera or out of frame"
        )
    denominator = m if divide_by_m_total else n_valid
    cost = float(np.sum(confidence * rho) / denominator)
    return ResidualBundle(
        deltas=deltas,
        jacobians=jacobians,
        weights=weights,
        validity=valid,
        cost=cost,
        rho=rho,
        confidence=confidence,
    )


__all__ = [
    "RobustKernel",
    "RefinementProblem",
    "ResidualBundle",
    "robust_eval",
    "select_sample_pixels",
    "build_problem",
    "evaluate_residuals",
]
