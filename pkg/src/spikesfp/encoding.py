"""Event stream -> voxel grid -> cumulative voxel grid (+ intensity image)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError
from .events import EventStream

__all__ = [
    "ConfigurationError",
    "VoxelGrid",
    "CvgriTensor",
    "build_voxel_grid",
    "build_cvgr",
    "build_cvgri",
    "encode_stream",
]

DEFAULT_BINS = 8


class ConfigurationError(ValueError):
    pass


@dataclass
class VoxelGrid:
    values: np.ndarray  # (B, H, W)
    t0: int
    duration: int

    @property
    def bins(self) -> int:
        return self.values.shape[0]


@dataclass
class CvgriTensor:
    values: np.ndarray  # (B, H, W)
    contrast_threshold: float | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def build_voxel_grid(stream: EventStream, bins: int = DEFAULT_BINS) -> VoxelGrid:
    """Bilinear-in-time voxel grid.

    Each event adds ``p * max(0, 1 - |b - t*|)`` to its two nearest bins, with
    ``t* = (B - 1) (t - t0) / duration``.  Events that land past the last bin
    through timestamp rounding are clamped onto it.
    """
    if bins < 2:
        raise ConfigurationError(f"need at least 2 bins, got {bins}")
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
    if len(stream) == 0:
        return VoxelGrid(grid, stream.t0, stream.duration)
    if stream.duration <= 0:
        raise ConfigurationError("stream duration must be positive")
    ts = (bins - 1) * (stream.t.astype(np.float64) - stream.t0) / stream.duration
    ts = np.clip(ts, 0.0, bins - 1)
    lo = np.floor(ts).astype(np.intp)
    frac = ts - lo
    last = lo >= bins - 1
    lo[last] = bins - 1
    frac[last] = 0.0
    p = stream.p.astype(np.float64)
    x = stream.x.astype(np.intp)
    y = stream.y.astype(np.intp)
    np.add.at(grid, (lo, y, x), p * (1.0 - frac))
    hi_ok = ~last
    np.add.at(grid, (lo[hi_ok] + 1, y[hi_ok], x[hi_ok]), p[hi_ok] * frac[hi_ok])
    return VoxelGrid(grid, stream.t0, stream.duration)


def build_cvgr(grid, contrast_threshold: float) -> np.ndarray:
    """``C`` times the running sum of the grid over the bin axis."""
    if contrast_threshold <= 0:
        raise ConfigurationError("contrast threshold must be positive")
    values = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    return contrast_threshold * np.cumsum(values, axis=0)


def build_cvgri(cvgr: np.ndarray, i0: np.ndarray, contrast_threshold: float | None = None,
                normalize: bool = False) -> CvgriTensor:
    """Add the angle-0 intensity image to every temporal bin.

    ``normalize`` applies a per-sample min-max rescale to [0, 1]; off by default.
    """
    cvgr = np.asarray(cvgr)
    i0 = np.asarray(i0)
    if cvgr.ndim != 3 or i0.shape != cvgr.shape[1:]:
        raise DimensionError(f"intensity image {i0.shape} does not match CVGR {cvgr.shape}")
    values = cvgr + i0[None]
    if normalize:
        lo, hi = values.min(), values.max()
        values = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    return CvgriTensor(values, contrast_threshold)


def encode_stream(stream: EventStream, i0: np.ndarray, contrast_threshold: float,
                  bins: int = DEFAULT_BINS, normalize: bool = False) -> CvgriTensor:
    grid = build_voxel_grid(stream, bins)
    return build_cvgri(build_cvgr(grid, contrast_threshold), i0, contrast_threshold, normalize)
