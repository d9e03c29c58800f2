from pathlib import Path

import numpy as np
import pytest

import featlm
from featlm.types import CameraIntrinsics, GridMap, SceneSpec, SyntheticScene


@pytest.fixture(scope="session")
def scene() -> SyntheticScene:
    """Default 64x64, 8-channel scene with a non-trivial ground-truth pose."""
    return featlm.generate_scene(SceneSpec(), seed=0)


@pytest.fixture(scope="session")
def identity_scene() -> SyntheticScene:
    """Scene whose query camera coincides with the reference camera."""
    return featlm.generate_scene(SceneSpec(translation_norm=0.0, max_rotation_deg=0.0), seed=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)


@pytest.fixture
def smooth_map() -> GridMap:
    """3-channel map sampled from smooth analytic functions."""
    v, u = np.mgrid[0:24, 0:32].astype(np.float64)
    data = np.stack([np.sin(u / 5.0) * np.cos(v / 7.0), 0.02 * u * v, np.cos(u / 3.0 + v / 4.0)])
    return GridMap(np.moveaxis(data, 0, -1))


@pytest.fixture
def exported_scene(tmp_path: Path, scene: SyntheticScene) -> Path:
    """The default scene written as a ``.gmap`` bundle; returns the manifest path."""
    return featlm.export_scene(scene, tmp_path / "scene")
