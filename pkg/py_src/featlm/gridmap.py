"""Dense H x W x C maps with bilinear sampling and the ``.gmap`` file format.

Layout of a ``.gmap`` file: the magic ``GMAP``, then ``u32`` little-endian
height, width and channel count, then ``H*W*C`` little-endian ``f32`` values in
row-major ``(row, column, channel)`` order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from featlm.errors import GridMapError, GridMapFormatError, InvalidDepthError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

MAGIC = b"GMAP"
_HEADER = struct.Struct("<III")
HEADER_SIZE = len(MAGIC) + _HEADER.size


@dataclass(frozen=True, eq=False)
class GridMap:
    """Immutable ``(height, width, channels)`` array of finite values.

    Files always hold ``f32``; maps computed in memory may keep ``float64``.
    """

    data: NDArray[np.floating]

    def __post_init__(self) -> None:
        arr = np.array(self.data, copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise GridMapError(f"grid map needs 2 or 3 dimensions, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise GridMapError(f"grid map dimensions must be positive, got {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise GridMapError("grid map contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def plane(self) -> FloatArray:
        """Single-channel maps as a ``(height, width)`` float64 array."""
        if self.channels != 1:
            raise GridMapError(f"expected a single-channel map, got {self.channels} channels")
        return np.asarray(self.data[:, :, 0], dtype=np.float64)

    def check_depth(self) -> GridMap:
        if self.channels != 1:
            raise GridMapError(f"depth maps have one channel, got {self.channels}")
        if np.any(self.data <= 0):
            raise InvalidDepthError("depth map has non-positive entries")
        return self

    def check_confidence(self) -> GridMap:
        if self.channels != 1:
            raise GridMapError(f"confidence maps have one channel, got {self.channels}")
        if np.any(self.data < 0) or np.any(self.data > 1):
            raise GridMapError("confidence map has entries outside [0, 1]")
        return self

    def __repr__(self) -> str:
        return f"GridMap(height={self.height}, width={self.width}, channels={self.channels})"


class BilinearSample(NamedTuple):
    """Sampled values, their ``(du, dv)`` gradients, and the in-frame flag."""

    value: FloatArray
    grad: FloatArray
    valid: NDArray[np.bool_]


def sample_many(grid: GridMap, u: ArrayLike, v: ArrayLike) -> BilinearSample:
    """Bilinear sampling at N continuous pixels.

    Out-of-frame pixels are clamped to the edge and flagged invalid; the
    gradient along a clamped axis is zero.
    """
    uu = np.asarray(u, dtype=np.float64).reshape(-1)
    vv = np.asarray(v, dtype=np.float64).reshape(-1)
    w_max, h_max = grid.width - 1, grid.height - 1
    finite = np.isfinite(uu) & np.isfinite(vv)
    uu = np.where(finite, uu, 0.0)
    vv = np.where(finite, vv, 0.0)
    inside_u = (uu >= 0) & (uu <= w_max)
    inside_v = (vv >= 0) & (vv <= h_max)

    uc = np.clip(uu, 0.0, w_max)
    vc = np.clip(vv, 0.0, h_max)
    u0 = np.minimum(np.floor(uc).astype(np.intp), max(w_max - 1, 0))
    v0 = np.minimum(np.floor(vc).astype(np.intp), max(h_max - 1, 0))
    u1 = np.minimum(u0 + 1, w_max)
    v1 = np.minimum(v0 + 1, h_max)
    au = (uc - u0)[:, None]
    av = (vc - v0)[:, None]

    d = grid.data
    f00 = d[v0, u0].astype(np.float64)
    f01 = d[v0, u1].astype(np.float64)
    f10 = d[v1, u0].astype(np.float64)
    f11 = d[v1, u1].astype(np.float64)

    top = (1.0 - au) * f00 + au * f01
    bottom = (1.0 - au) * f10 + au * f11
    value = (1.0 - av) * top + av * bottom
    du = (1.0 - av) * (f01 - f00) + av * (f11 - f10)
    dv = (1.0 - au) * (f10 - f00) + au * (f11 - f01)
    du = np.where(inside_u[:, None], du, 0.0)
    dv = np.where(inside_v[:, None], dv, 0.0)
    return BilinearSample(value, np.stack([du, dv], axis=-1), finite & inside_u & inside_v)


def bilinear_sample(grid: GridMap, px: ArrayLike) -> BilinearSample:
    """Sample one pixel: value ``(C,)``, gradient ``(C, 2)``, validity flag."""
    u, v = np.asarray(px, dtype=np.float64).reshape(2)
    s = sample_many(grid, [u], [v])
    return BilinearSample(s.value[0], s.grad[0], s.valid[0])


def l2_normalize(grid: GridMap, *, eps: float = 1e-12) -> GridMap:
    """Scale every pixel's feature vector to unit L2 norm."""
    data = np.asarray(grid.data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=-1, keepdims=True)
    return GridMap(data / np.maximum(norms, eps))


def save_gridmap(grid: GridMap, path: str | PathLike[str]) -> None:
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    Path(path).write_bytes(MAGIC + _HEADER.pack(*grid.shape) + payload)
    logger.debug("wrote %s to %s", grid, path)


def load_gridmap(path: str | PathLike[str]) -> GridMap:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise GridMapFormatError(f"{path}: bad magic {buf[:4]!r}", offset=0)
    if len(buf) < HEADER_SIZE:
        raise GridMapFormatError(f"{path}: truncated header", offset=len(buf))
    height, width, channels = _HEADER.unpack_from(buf, len(MAGIC))
    count = height * width * channels
    expected = HEADER_SIZE + 4 * count
    if len(buf) < expected:
        raise GridMapFormatError(
            f"{path}: truncated payload, expected {expected} bytes, found {len(buf)}",
            offset=len(buf),
        )
    if len(buf) > expected:
        raise GridMapFormatError(f"{path}: trailing bytes after payload", offset=expected)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=HEADER_SIZE)
    grid = GridMap(data.astype(np.float32).reshape(height, width, channels))
    logger.debug("read %s from %s", grid, path)
    return grid


__all__ = [
    "GridMap",
    "BilinearSample",
    "bilinear_sample",
    "sample_many",
    "l2_normalize",
    "load_gridmap",
    "save_gridmap",
]
