import struct

import numpy as np
import pytest

import featlm
from featlm.errors import GridMapError, GridMapFormatError, InvalidDepthError
from featlm.gridmap import HEADER_SIZE
from featlm.types import GridMap


def test_two_dimensional_input_gets_a_channel_axis():
    grid = GridMap(np.ones((4, 5)))
    assert grid.shape == (4, 5, 1)
    assert grid.height == 4 and grid.width == 5 and grid.channels == 1


def test_integer_dtypes_become_float32():
    assert GridMap(np.arange(6).reshape(2, 3)).data.dtype == np.float32


def test_rejects_non_finite():
    with pytest.raises(GridMapError):
        GridMap(np.array([[1.0, np.nan]]))


def test_data_is_immutable_copy():
    raw = np.zeros((2, 2))
    grid = GridMap(raw)
    raw[0, 0] = 5.0
    assert grid.data[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        grid.data[0, 0, 0] = 1.0


def test_sample_at_integer_pixel_is_exact(smooth_map):
    sample = featlm.bilinear_sample(smooth_map, [7.0, 5.0])
    np.testing.assert_array_equal(sample.value, smooth_map.data[5, 7])
    assert sample.valid


def test_sample_between_pixels_is_bilinear():
    grid = GridMap(np.array([[0.0, 1.0], [2.0, 3.0]]))
    sample = featlm.bilinear_sample(grid, [0.5, 0.5])
    assert sample.value[0] == pytest.approx(1.5)
    np.testing.assert_allclose(sample.grad[0], [1.0, 2.0])


def test_gradient_matches_finite_differences(smooth_map, rng):
    u = rng.integers(0, 30, 500) + rng.uniform(0.1, 0.9, 500)
    v = rng.integers(0, 22, 500) + rng.uniform(0.1, 0.9, 500)
    s = featlm.sample_many(smooth_map, u, v)
    h = 1e-5

    def at(du_, dv_):
        return featlm.sample_many(smooth_map, u + du_, v + dv_).value

    du = (at(h, 0.0) - at(-h, 0.0)) / (2 * h)
    dv = (at(0.0, h) - at(0.0, -h)) / (2 * h)
    np.testing.assert_allclose(s.grad[..., 0], du, atol=1e-6)
    np.testing.assert_allclose(s.grad[..., 1], dv, atol=1e-6)


def test_affine_map_is_reproduced_exactly(rng):
    vv, uu = np.mgrid[0:10, 0:12].astype(np.float64)
    coeffs = np.array([[0.5, -1.25, 2.0], [3.0, 0.75, -0.5]])
    data = np.stack([a + b * uu + c * vv for a, b, c in coeffs], axis=-1)
    grid = GridMap(data)
    u = rng.uniform(0.0, 11.0, 200)
    v = rng.uniform(0.0, 9.0, 200)
    s = featlm.sample_many(grid, u, v)
    expected = coeffs[:, 0] + coeffs[:, 1] * u[:, None] + coeffs[:, 2] * v[:, None]
    np.testing.assert_allclose(s.value, expected, atol=1e-12)
    np.testing.assert_allclose(s.grad[..., 0], np.broadcast_to(coeffs[:, 1], (200, 2)), atol=1e-12)
    np.testing.assert_allclose(s.grad[..., 1], np.broadcast_to(coeffs[:, 2], (200, 2)), atol=1e-12)
    assert s.valid.all()


def test_out_of_frame_is_clamped_and_invalid(smooth_map):
    s = featlm.sample_many(smooth_map, [-3.0, 40.0, 10.0], [5.0, 5.0, 30.0])
    assert not s.valid.any()
    np.testing.assert_array_equal(s.value[0], smooth_map.data[5, 0])
    np.testing.assert_array_equal(s.grad[0, :, 0], 0.0)
    np.testing.assert_array_equal(s.grad[2, :, 1], 0.0)


def test_non_finite_coordinates_are_invalid(smooth_map):
    s = featlm.sample_many(smooth_map, [np.nan], [1.0])
    assert not s.valid[0]


def test_far_edge_is_valid(smooth_map):
    s = featlm.sample_many(smooth_map, [31.0], [23.0])
    assert s.valid[0]
    np.testing.assert_array_equal(s.value[0], smooth_map.data[23, 31])


def test_l2_normalize(smooth_map):
    normalized = featlm.l2_normalize(smooth_map)
    norms = np.linalg.norm(normalized.data, axis=-1)
    np.testing.assert_allclose(norms[norms > 0], 1.0, atol=1e-12)


def test_depth_and_confidence_checks():
    with pytest.raises(InvalidDepthError):
        GridMap(np.array([[1.0, 0.0]])).check_depth()
    with pytest.raises(GridMapError):
        GridMap(np.array([[0.5, 1.5]])).check_confidence()
    with pytest.raises(GridMapError):
        GridMap(np.ones((2, 2, 2))).check_depth()


def test_save_load_round_trip(tmp_path, smooth_map):
    path = tmp_path / "map.gmap"
    featlm.save_gridmap(smooth_map, path)
    assert path.stat().st_size == HEADER_SIZE + 4 * 24 * 32 * 3
    loaded = featlm.load_gridmap(path)
    assert loaded.shape == smooth_map.shape
    assert loaded.data.dtype == np.float32
    np.testing.assert_array_equal(loaded.data, smooth_map.data.astype(np.float32))


def test_save_of_a_loaded_map_is_byte_identical(tmp_path, smooth_map):
    first, second = tmp_path / "a.gmap", tmp_path / "b.gmap"
    featlm.save_gridmap(smooth_map, first)
    featlm.save_gridmap(featlm.load_gridmap(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_full_resolution_round_trip(tmp_path, rng):
    grid = GridMap(rng.uniform(-1.0, 1.0, (192, 640, 3)).astype(np.float32))
    path = tmp_path / "kitti.gmap"
    featlm.save_gridmap(grid, path)
    assert path.stat().st_size == HEADER_SIZE + 4 * 192 * 640 * 3
    loaded = featlm.load_gridmap(path)
    assert loaded.shape == (192, 640, 3)
    np.testing.assert_array_equal(loaded.data, grid.data)


def test_file_layout_is_little_endian(tmp_path):
    path = tmp_path / "tiny.gmap"
    featlm.save_gridmap(GridMap(np.array([[1.0, 2.0]], dtype=np.float32)), path)
    raw = path.read_bytes()
    assert raw[:4] == b"GMAP"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 1)
    assert struct.unpack("<2f", raw[16:]) == (1.0, 2.0)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "bad.gmap"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(GridMapFormatError) as excinfo:
        featlm.load_gridmap(path)
    assert excinfo.value.offset == 0


def test_load_truncated_header(tmp_path):
    path = tmp_path / "short.gmap"
    path.write_bytes(b"GMAP\x01\x00")
    with pytest.raises(GridMapFormatError) as excinfo:
        featlm.load_gridmap(path)
    assert excinfo.value.offset == 6


def test_load_truncated_payload(tmp_path):
    path = tmp_path / "cut.gmap"
    path.write_bytes(b"GMAP" + struct.pack("<III", 2, 2, 1) + b"\x00" * 8)
    with pytest.raises(GridMapFormatError) as excinfo:
        featlm.load_gridmap(path)
    assert excinfo.value.offset == 24
    assert "offset 24" in str(excinfo.value)


def test_load_trailing_bytes(tmp_path):
    path = tmp_path / "long.gmap"
    path.write_bytes(b"GMAP" + struct.pack("<III", 1, 1, 1) + b"\x00" * 8)
    with pytest.raises(GridMapFormatError) as excinfo:
        featlm.load_gridmap(path)
    assert excinfo.value.offset == 20


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        featlm.load_gridmap(tmp_path / "missing.gmap")
