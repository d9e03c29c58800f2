"""Synthetic scenes with exactly known depth, pose and features.

A scene is a smooth heightfield ``z = h(x, y)`` in the reference camera frame
textured by a band-limited world-space feature field (a sum of sinusoids).
Both views are ray-cast against the surface, so the query features at the
ground-truth pose agree with the reference features up to bilinear sampling
error.

The module also runs the toy scale-alignment experiment: per-scene
depth-scale and pose-scale errors, with the pose either left alone, refined
against the depth, or pinned by a velocity measurement.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from os import PathLike
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize_scalar

from featlm._parallel import parallel_map
from featlm.camera import CameraIntrinsics, save_intrinsics
from featlm.errors import (
    ConfigError,
    DegenerateProblemError,
    InvalidArgumentError,
    InvalidSceneError,
)
from featlm.gridmap import GridMap, save_gridmap
from featlm.lie import SE3Pose, Twist, compose, exp_se3
from featlm.losses import VelocitySample
from featlm.residual import MIN_POINTS, RefinementProblem, build_problem, evaluate_residuals
from featlm.solver import RefinementConfig, refine_pose

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

ConfidenceKind = Literal["uniform", "smooth"]
Regime = Literal["free", "refined", "supervised"]
REGIMES: tuple[Regime, ...] = ("free", "refined", "supervised")

_NEWTON_STEPS = 12
_NEWTON_TOL = 1e-9
_MIN_WAVELENGTH_PX = 2.0


@dataclass(frozen=True)
class SceneSpec:
    """Scene generation parameters.

    ``scale`` multiplies every length (surface, feature wavelengths and the
    ground-truth translation), so scenes differing only in ``scale`` render
    identical feature maps.
    """

    height: int = 64
    width: int = 64
    channels: int = 8
    base_depth: float = 10.0
    max_slope: float = 0.3
    bumps: int = 4
    bump_amplitude: float = 1.0
    wavelength_min: float = 10.0
    wavelength_max: float = 24.0
    focal_ratio: float = 0.9
    translation_norm: float = 1.0
    max_rotation_deg: float = 3.0
    scale: float = 1.0
    confidence: ConfidenceKind = "uniform"
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 5.0

    def __post_init__(self) -> None:
        if self.height < 16 or self.width < 16:
            raise InvalidSceneError(
                f"scenes need at least 16x16 pixels, got {self.width}x{self.height}"
            )
        if self.channels < 1:
            raise InvalidSceneError(f"need at least one feature channel, got {self.channels}")
        positive = {
            "base_depth": self.base_depth,
            "wavelength_min": self.wavelength_min,
            "focal_ratio": self.focal_ratio,
            "scale": self.scale,
        }
        for name, value in positive.items():
            if not (math.isfinite(value) and value > 0):
                raise InvalidSceneError(f"{name} must be positive, got {value}")
        if self.wavelength_max < self.wavelength_min:
            raise InvalidSceneError("wavelength_max is below wavelength_min")
        if not 0 <= self.max_slope < 1:
            raise InvalidSceneError(f"max_slope must lie in [0, 1), got {self.max_slope}")
        if self.bumps < 0 or self.bump_amplitude < 0:
            raise InvalidSceneError("bump count and amplitude must be non-negative")
        if self.translation_norm < 0 or not 0 <= self.max_rotation_deg < 90:
            raise InvalidSceneError("pose magnitudes out of range")
        if self.confidence not in ("uniform", "smooth"):
            raise InvalidSceneError(f"unknown confidence kind {self.confidence!r}")
        if not 0 <= self.outlier_fraction <= 1 or self.outlier_magnitude < 0:
            raise InvalidSceneError("outlier fraction must lie in [0, 1], magnitude >= 0")

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal_ratio * self.width
        return CameraIntrinsics(
            fx=f,
            fy=f,
            cx=(self.width - 1) / 2.0,
            cy=(self.height - 1) / 2.0,
            width=self.width,
            height=self.height,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SceneSpec:
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidSceneError(f"bad scene spec: {exc}") from exc


@dataclass(frozen=True, eq=False)
class Surface:
    """Heightfield: tilted plane plus Gaussian bumps, in unit-scale coordinates."""

    base: float
    slope: FloatArray
    centers: FloatArray
    amplitudes: FloatArray
    widths: FloatArray

    def height(
        self, x: FloatArray, y: FloatArray, scale: float
    ) -> tuple[FloatArray, FloatArray, FloatArray]:
        """``s * h(x / s, y / s)`` and its ``x``/``y`` derivatives."""
        xs, ys = x / scale, y / scale
        z = self.base + self.slope[0] * xs + self.slope[1] * ys
        dx = np.full_like(xs, self.slope[0])
        dy = np.full_like(ys, self.slope[1])
        for (cx, cy), amp, width in zip(self.centers, self.amplitudes, self.widths):
            ox, oy = xs - cx, ys - cy
            bump = amp * np.exp(-(ox * ox + oy * oy) / (2.0 * width * width))
            z = z + bump
            dx = dx - bump * ox / (width * width)
            dy = dy - bump * oy / (width * width)
        return scale * z, dx, dy


@dataclass(frozen=True, eq=False)
class FeatureField:
    """``amplitude * sin(k . p / scale + phase)`` per channel."""

    wave_vectors: FloatArray
    phases: FloatArray
    amplitude: float

    def evaluate(self, points: FloatArray, scale: float) -> FloatArray:
        return self.amplitude * np.sin((points / scale) @ self.wave_vectors.T + self.phases)

    @classmethod
    def random(
        cls, rng: np.random.Generator, channels: int, wavelengths: tuple[float, float]
    ) -> FeatureField:
        directions = rng.standard_normal((channels, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        lengths = rng.uniform(wavelengths[0], wavelengths[1], size=channels)
        return cls(
            wave_vectors=directions * (2.0 * math.pi / lengths)[:, None],
            phases=rng.uniform(0.0, 2.0 * math.pi, size=channels),
            amplitude=1.0 / math.sqrt(channels),
        )


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    spec: SceneSpec
    seed: int
    intrinsics: CameraIntrinsics
    gt_pose: SE3Pose
    ref_depth: GridMap
    ref_feature: GridMap
    query_feature: GridMap
    ref_confidence: GridMap
    query_confidence: GridMap
    outlier_mask: NDArray[np.bool_]
    surface: Surface
    features: FeatureField

    def problem(
        self, *, num_points: int = 512, seed: int = 0, use_confidence: bool = True
    ) -> RefinementProblem:
        return build_problem(
            self.ref_feature,
            self.query_feature,
            self.ref_depth,
            self.intrinsics,
            ref_confidence=self.ref_confidence,
            query_confidence=self.query_confidence,
            num_points=num_points,
            seed=seed,
            use_confidence=use_confidence,
        )


def _pixel_rays(k: CameraIntrinsics) -> FloatArray:
    vs, us = np.mgrid[0 : k.height, 0 : k.width]
    x = (us.ravel() - k.cx) / k.fx
    y = (vs.ravel() - k.cy) / k.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def _cast(surface: Surface, origin: FloatArray, rays: FloatArray, scale: float) -> FloatArray:
    """Newton ray-surface intersection; returns the hit points."""
    lam = (scale * surface.base - origin[2]) / rays[:, 2]
    for _ in range(_NEWTON_STEPS):
        p = origin + lam[:, None] * rays
        h, hx, hy = surface.height(p[:, 0], p[:, 1], scale)
        slope = rays[:, 2] - hx * rays[:, 0] - hy * rays[:, 1]
        lam = lam - (p[:, 2] - h) / slope
    hits = origin + lam[:, None] * rays
    h, _, _ = surface.height(hits[:, 0], hits[:, 1], scale)
    miss = np.abs(hits[:, 2] - h) > _NEWTON_TOL * scale * max(1.0, surface.base)
    if np.any(miss) or np.any(lam <= 0):
        raise InvalidSceneError("ray casting did not converge; the surface is too steep")
    return hits


def render_view(
    scene_surface: Surface,
    scene_features: FeatureField,
    pose: SE3Pose,
    k: CameraIntrinsics,
    scale: float = 1.0,
) -> tuple[FloatArray, FloatArray]:
    """World hit points and features seen by a camera at ``pose`` (world to camera)."""
    origin = -pose.rotation.T @ pose.translation
    rays = _pixel_rays(k) @ pose.rotation
    hits = _cast(scene_surface, origin, rays, scale)
    return hits, scene_features.evaluate(hits, scale)


def _random_surface(rng: np.random.Generator, spec: SceneSpec) -> Surface:
    # bump centers stay within the footprint of the frame at base depth
    half_extent = spec.base_depth * 0.5 / spec.focal_ratio
    return Surface(
        base=spec.base_depth,
        slope=rng.uniform(-spec.max_slope, spec.max_slope, size=2),
        centers=rng.uniform(-half_extent, half_extent, size=(spec.bumps, 2)),
        amplitudes=rng.uniform(-spec.bump_amplitude, spec.bump_amplitude, size=spec.bumps),
        widths=rng.uniform(0.15, 0.3, size=spec.bumps) * spec.base_depth,
    )


def _random_pose(rng: np.random.Generator, spec: SceneSpec) -> SE3Pose:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, spec.max_rotation_deg))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    rotation = exp_se3(Twist(axis * angle, np.zeros(3))).rotation
    return SE3Pose(rotation, direction * spec.translation_norm * spec.scale)


def generate_scene(spec: SceneSpec | None = None, seed: int = 0) -> SyntheticScene:
    """Generate a scene; the same ``(spec, seed)`` always gives identical arrays."""
    spec = spec or SceneSpec()
    if seed < 0:
        raise InvalidSceneError(f"seed must be non-negative, got {seed}")
    rng = np.random.default_rng(seed)
    k = spec.intrinsics()
    surface = _random_surface(rng, spec)
    features = FeatureField.random(rng, spec.channels, (spec.wavelength_min, spec.wavelength_max))
    confidence_field = FeatureField.random(rng, 1, (spec.wavelength_min, spec.wavelength_max))
    gt_pose = _random_pose(rng, spec)

    shape = (spec.height, spec.width)
    ref_points, ref_values = render_view(surface, features, SE3Pose.identity(), k, spec.scale)
    query_points, query_values = render_view(surface, features, gt_pose, k, spec.scale)
    depth = ref_points[:, 2].reshape(shape)
    if np.any(depth <= 0):
        raise InvalidSceneError("generated depth is not positive everywhere")
    nearest_px = spec.wavelength_min * k.fx / (float(depth.max()) / spec.scale)
    if nearest_px < _MIN_WAVELENGTH_PX:
        raise InvalidSceneError(
            f"shortest feature wavelength spans {nearest_px:.2f} px, below the sampling limit"
        )

    if spec.confidence == "smooth":
        ref_conf = 0.75 + 0.25 * confidence_field.evaluate(ref_points, spec.scale)[:, 0]
        query_conf = 0.75 + 0.25 * confidence_field.evaluate(query_points, spec.scale)[:, 0]
        ref_conf, query_conf = np.clip(ref_conf, 0.5, 1.0), np.clip(query_conf, 0.5, 1.0)
    else:
        ref_conf = query_conf = np.ones(ref_points.shape[0])

    outliers = np.zeros(ref_values.shape[0], dtype=bool)
    count = int(round(spec.outlier_fraction * outliers.size))
    if count:
        chosen = rng.choice(outliers.size, size=count, replace=False)
        offsets = rng.standard_normal((count, spec.channels))
        offsets *= spec.outlier_magnitude / np.linalg.norm(offsets, axis=1, keepdims=True)
        ref_values = ref_values.copy()
        ref_values[chosen] += offsets
        outliers[chosen] = True

    logger.debug("generated %dx%d scene with seed %d", spec.width, spec.height, seed)
    return SyntheticScene(
        spec=spec,
        seed=seed,
        intrinsics=k,
        gt_pose=gt_pose,
        ref_depth=GridMap(depth),
        ref_feature=GridMap(ref_values.reshape(*shape, spec.channels)),
        query_feature=GridMap(query_values.reshape(*shape, spec.channels)),
        ref_confidence=GridMap(ref_conf.reshape(shape)),
        query_confidence=GridMap(query_conf.reshape(shape)),
        outlier_mask=outliers.reshape(shape),
        surface=surface,
        features=features,
    )


def perturb_pose(pose: SE3Pose, twist_norm: float, rng: np.random.Generator) -> SE3Pose:
    """``exp(xi) * pose`` for a random twist ``xi`` with ``|xi| = twist_norm``."""
    if twist_norm < 0:
        raise InvalidArgumentError(f"twist_norm must be non-negative, got {twist_norm}")
    direction = rng.standard_normal(6)
    direction /= np.linalg.norm(direction)
    return compose(exp_se3(direction * twist_norm), pose)


SCENE_FILES = {
    "ref_feature": "ref_feature.gmap",
    "query_feature": "query_feature.gmap",
    "ref_confidence": "ref_confidence.gmap",
    "query_confidence": "query_confidence.gmap",
    "ref_depth": "ref_depth.gmap",
    "intrinsics": "intrinsics.txt",
}
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SceneManifest:
    intrinsics: CameraIntrinsics
    gt_pose: SE3Pose
    seed: int
    spec: SceneSpec
    files: dict[str, Path]


def export_scene(scene: SyntheticScene, directory: str | PathLike[str]) -> Path:
    """Write the maps as ``.gmap`` files plus ``manifest.json``; returns the manifest path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, filename in SCENE_FILES.items():
        if name == "intrinsics":
            save_intrinsics(scene.intrinsics, out / filename)
        else:
            save_gridmap(getattr(scene, name), out / filename)
    manifest = {
        "intrinsics": asdict(scene.intrinsics),
        "gt_pose": scene.gt_pose.matrix()[:3, :].ravel().tolist(),
        "seed": scene.seed,
        "spec": scene.spec.to_dict(),
        "files": dict(SCENE_FILES),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    logger.debug("exported scene to %s", out)
    return path


def load_scene_manifest(path: str | PathLike[str]) -> SceneManifest:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
        pose = SE3Pose.from_matrix(np.asarray(data["gt_pose"], dtype=np.float64).reshape(3, 4))
        files = {name: p.parent / name_on_disk for name, name_on_disk in data["files"].items()}
        return SceneManifest(
            intrinsics=CameraIntrinsics(**data["intrinsics"]),
            gt_pose=pose,
            seed=int(data["seed"]),
            spec=SceneSpec.from_dict(data["spec"]),
            files=files,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidSceneError):
            raise
        raise InvalidSceneError(f"{p}: malformed scene manifest: {exc}") from exc


@dataclass(frozen=True)
class ScaleExperimentConfig:
    """Toy scale-alignment experiment.

    Each scene gets a depth-network scale error ``a = exp(N(0, depth_scale_sigma))``
    and a pose-network scale error ``b = exp(N(0, pose_scale_sigma))``.
    """

    runs: int = 20
    regimes: tuple[Regime, ...] = REGIMES
    depth_scale_sigma: float = 0.05
    pose_scale_sigma: float = 0.4
    rounds: int = 2
    frame_interval: float = 0.1
    scale_bounds: tuple[float, float] = (0.1, 10.0)
    scene: SceneSpec = field(default_factory=SceneSpec)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if not self.regimes or any(r not in REGIMES for r in self.regimes):
            raise ConfigError(f"regimes must be drawn from {REGIMES}, got {self.regimes}")
        if self.depth_scale_sigma < 0 or self.pose_scale_sigma < 0:
            raise ConfigError("scale spreads must be non-negative")
        if self.rounds < 1 or not self.frame_interval > 0:
            raise ConfigError("rounds must be >= 1 and frame_interval positive")
        lo, hi = self.scale_bounds
        if not 0 < lo < 1 < hi:
            raise ConfigError(f"scale_bounds must bracket 1, got {self.scale_bounds}")


@dataclass(frozen=True)
class ScaleRun:
    regime: Regime
    scene_index: int
    s_depth: float
    s_pose: float


@dataclass(frozen=True)
class RegimeStats:
    mean_s_depth: float
    std_s_depth: float
    mean_s_pose: float
    std_s_pose: float


@dataclass(frozen=True)
class ScaleExperimentReport:
    seed: int
    runs: list[ScaleRun]
    stats: dict[str, RegimeStats]

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "stats": {regime: asdict(s) for regime, s in self.stats.items()},
            "runs": [asdict(r) for r in self.runs],
        }

    def csv_rows(self) -> list[str]:
        rows = ["regime,scene,s_depth,s_pose"]
        rows += [f"{r.regime},{r.scene_index},{r.s_depth!r},{r.s_pose!r}" for r in self.runs]
        return rows


def _fit_depth_scale(
    problem: RefinementProblem,
    depths: FloatArray,
    pose: SE3Pose,
    cfg: ScaleExperimentConfig,
) -> float:
    """Depth multiplier ``c`` minimizing the feature cost at a fixed pose."""
    kernel = cfg.refinement.kernel

    def cost(log_c: float) -> float:
        candidate = replace(problem, depth_values=depths * math.exp(log_c))
        try:
            bundle = evaluate_residuals(candidate, pose, kernel)
        except DegenerateProblemError:
            return math.inf
        return bundle.cost if bundle.num_valid >= MIN_POINTS else math.inf

    lo, hi = cfg.scale_bounds
    result = minimize_scalar(
        cost, bounds=(math.log(lo), math.log(hi)), method="bounded", options={"xatol": 1e-6}
    )
    return math.exp(float(result.x))


def _with_translation_norm(pose: SE3Pose, norm: float) -> SE3Pose:
    current = float(np.linalg.norm(pose.translation))
    if current == 0.0:
        return pose
    return SE3Pose(pose.rotation, pose.translation * (norm / current))


def _run_scene(cfg: ScaleExperimentConfig, seed: int, index: int) -> list[ScaleRun]:
    seq = np.random.SeedSequence([seed, index])
    rng = np.random.default_rng(seq)
    scene = generate_scene(cfg.scene, int(seq.generate_state(1)[0]) & 0x7FFFFFFF)
    depth_error = math.exp(rng.normal(0.0, cfg.depth_scale_sigma))
    pose_error = math.exp(rng.normal(0.0, cfg.pose_scale_sigma))

    problem = scene.problem(num_points=cfg.refinement.num_points, seed=cfg.refinement.seed)
    predicted_depths = problem.sample_depths() / depth_error
    predicted_pose = SE3Pose(scene.gt_pose.rotation, scene.gt_pose.translation / pose_error)
    gt_norm = float(np.linalg.norm(scene.gt_pose.translation))
    velocity = VelocitySample(speed=gt_norm / cfg.frame_interval, dt=cfg.frame_interval)

    runs = []
    for regime in cfg.regimes:
        pose = predicted_pose
        c = 1.0
        if regime == "free":
            c = _fit_depth_scale(problem, predicted_depths, pose, cfg)
        else:
            for _ in range(cfg.rounds):
                if regime == "supervised":
                    pose = _with_translation_norm(pose, velocity.distance)
                    c = _fit_depth_scale(problem, predicted_depths, pose, cfg)
                scaled = replace(problem, depth_values=predicted_depths * c)
                pose, _ = refine_pose(scaled, pose, cfg.refinement)
                if regime == "refined":
                    c = _fit_depth_scale(problem, predicted_depths, pose, cfg)
        t_norm = float(np.linalg.norm(pose.translation))
        runs.append(
            ScaleRun(
                regime=regime,
                scene_index=index,
                s_depth=depth_error / c,
                s_pose=gt_norm / t_norm if t_norm > 0 else math.inf,
            )
        )
    return runs


def scale_alignment_experiment(
    cfg: ScaleExperimentConfig | None = None,
    seed: int = 0,
    *,
    max_workers: int | None = None,
) -> ScaleExperimentReport:
    """Per-regime spread of the depth and pose scale factors over ``cfg.runs`` scenes.

    ``s_depth`` is ``median(D_gt) / median(D_pred)`` and ``s_pose`` is
    ``|t_gt| / |t_pred|``. Statistics use the population standard deviation.
    """
    cfg = cfg or ScaleExperimentConfig()
    per_scene = parallel_map(
        lambda index: _run_scene(cfg, seed, index), range(cfg.runs), max_workers=max_workers
    )
    runs = [run for scene_runs in per_scene for run in scene_runs]
    stats: dict[str, RegimeStats] = {}
    for regime in cfg.regimes:
        depth = np.array([r.s_depth for r in runs if r.regime == regime])
        pose = np.array([r.s_pose for r in runs if r.regime == regime])
        stats[regime] = RegimeStats(
            mean_s_depth=float(depth.mean()),
            std_s_depth=float(depth.std()),
            mean_s_pose=float(pose.mean()),
            std_s_pose=float(pose.std()),
        )
        logger.info(
            "%s: std(s_depth)=%.4f std(s_pose)=%.4f",
            regime,
            stats[regime].std_s_depth,
            stats[regime].std_s_pose,
        )
    return ScaleExperimentReport(seed=seed, runs=runs, stats=stats)


__all__ = [
    "SceneSpec",
    "SyntheticScene",
    "SceneManifest",
    "Surface",
    "FeatureField",
    "ScaleExperimentConfig",
    "ScaleExperimentReport",
    "ScaleRun",
    "RegimeStats",
    "generate_scene",
    "render_view",
    "perturb_pose",
    "export_scene",
    "load_scene_manifest",
    "scale_alignment_experiment",
]
