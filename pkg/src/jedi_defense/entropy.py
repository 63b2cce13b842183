"""Local Shannon-entropy heatmaps and the clean-data dynamic threshold."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from jedi_defense.errors import GeometryError, InsufficientDataError
from jedi_defense.imagecore import to_gray

MIN_WINDOW = 8
MIN_STATS_WINDOWS = 100
DEFAULT_W_TOLERANCE = 1.0
# bound on the (windows x 256) count table built per chunk
_CHUNK_CELLS = 4_000_000


@dataclass(frozen=True)
class WindowGeometry:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < MIN_WINDOW:
            raise GeometryError(f"window must be >= {MIN_WINDOW}, got {self.window}")
        if not 1 <= self.stride <= self.window:
            raise GeometryError(f"stride must be in [1, window], got {self.stride}")

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        if self.window > height or self.window > width:
            raise GeometryError(f"window {self.window} larger than image {width}x{height}")
        return (height - self.window) // self.stride + 1, (width - self.window) // self.stride + 1


@dataclass(frozen=True)
class EntropyHeatmap:
    grid: np.ndarray
    geometry: WindowGeometry
    source_shape: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def to_json(self) -> dict:
        return {
            "window": self.geometry.window,
            "stride": self.geometry.stride,
            "height": self.source_shape[0],
            "width": self.source_shape[1],
            "grid": self.grid.tolist(),
        }

    def to_image(self) -> np.ndarray:
        """Heatmap scaled from [0, 8] bits to [0, 255] for viewing."""
        return np.clip(np.rint(self.grid * (255.0 / 8.0)), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class CleanEntropyStats:
    mu_clean: float
    sigma_clean: float
    n_windows: int
    geometry: WindowGeometry

    def to_json(self) -> dict:
        return {
            "mu": self.mu_clean,
            "sigma": self.sigma_clean,
            "n_windows": self.n_windows,
            "window": self.geometry.window,
            "stride": self.geometry.stride,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CleanEntropyStats":
        return cls(
            mu_clean=float(data["mu"]),
            sigma_clean=float(data["sigma"]),
            n_windows=int(data["n_windows"]),
            geometry=WindowGeometry(int(data["window"]), int(data["stride"])),
        )

    def save(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CleanEntropyStats":
        with open(os.fspath(path)) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class ThresholdParams:
    w_tolerance: float
    w_image: float
    thr: float


def _entropy_from_counts(counts: np.ndarray, n: int) -> np.ndarray:
    """Plug-in entropy (bits) for each row of a count table whose rows sum to ``n``."""
    c = counts.astype(np.float64)
    clog = np.zeros_like(c)
    nz = c > 0
    clog[nz] = c[nz] * np.log2(c[nz])
    return np.maximum(math.log2(n) - clog.sum(axis=-1) / n, 0.0)


def local_entropy(window: np.ndarray) -> float:
    """Shannon entropy in bits of the 256-bin intensity histogram of ``window``."""
    values = np.asarray(window)
    if values.size == 0:
        raise ValueError("window is empty")
    if values.dtype != np.uint8:
        values = values.astype(np.uint8)
    counts = np.bincount(values.ravel(), minlength=256)
    return float(_entropy_from_counts(counts, values.size))


def _block_entropies(blocks: np.ndarray) -> np.ndarray:
    """Entropies for ``blocks`` of shape ``(n, k)`` uint8, one window per row."""
    n, k = blocks.shape
    out = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK_CELLS // 256)
    for start in range(0, n, step):
        chunk = blocks[start : start + step]
        m = chunk.shape[0]
        idx = chunk.astype(np.int64) + (256 * np.arange(m, dtype=np.int64))[:, None]
        counts = np.bincount(idx.ravel(), minlength=256 * m).reshape(m, 256)
        out[start : start + m] = _entropy_from_counts(counts, k)
    return out


def compute_heatmap(image: np.ndarray, geometry: WindowGeometry) -> EntropyHeatmap:
    """Slide a ``window x window`` box with the given stride and record each window's entropy.

    Cell ``(i, j)`` covers pixels ``[i*stride, i*stride + window)`` by
    ``[j*stride, j*stride + window)``. Colour input is converted to luma first.
    """
    gray = to_gray(image)
    h, w = gray.shape
    gh, gw = geometry.grid_shape(h, w)
    win = geometry.window
    views = sliding_window_view(gray, (win, win))[:: geometry.stride, :: geometry.stride]
    views = views[:gh, :gw]
    blocks = views.reshape(gh * gw, win * win)
    grid = _block_entropies(blocks).reshape(gh, gw)
    return EntropyHeatmap(grid=grid, geometry=geometry, source_shape=(h, w))


def auto_window_size(width: int, height: int) -> int:
    """1% of the largest image dimension, never below 8 pixels."""
    if width < MIN_WINDOW or height < MIN_WINDOW:
        raise GeometryError("image dimensions must be >= 8")
    # half-up rounding: 850 px -> 9
    return max(MIN_WINDOW, int(math.floor(0.01 * max(width, height) + 0.5)))


def auto_stride(window: int) -> int:
    if window < MIN_WINDOW:
        raise GeometryError("window must be >= 8")
    return max(1, window // 2)


def auto_geometry(width: int, height: int) -> WindowGeometry:
    window = auto_window_size(width, height)
    return WindowGeometry(window, auto_stride(window))


def stats_from_cells(cells, geometry: WindowGeometry, min_windows: int = MIN_STATS_WINDOWS) -> CleanEntropyStats:
    values = np.asarray(cells, dtype=np.float64).ravel()
    if values.size < max(1, min_windows):
        raise InsufficientDataError(f"need at least {min_windows} windows, got {values.size}")
    mu = float(values.mean())
    sigma = float(values.std())
    return CleanEntropyStats(mu_clean=mu, sigma_clean=sigma, n_windows=int(values.size), geometry=geometry)


def fit_clean_stats(images, geometry: WindowGeometry, min_windows: int = MIN_STATS_WINDOWS) -> CleanEntropyStats:
    """Mean and population standard deviation of all heatmap cells of ``images``."""
    cells = [compute_heatmap(img, geometry).grid.ravel() for img in images]
    if not cells:
        raise InsufficientDataError("no images given")
    return stats_from_cells(np.concatenate(cells), geometry, min_windows=min_windows)


def compute_w_image(heatmap: EntropyHeatmap, stats: CleanEntropyStats) -> float:
    """Standardised shift of the image's median cell entropy, clamped to [-1, 1]."""
    if stats.sigma_clean <= 0.0:
        return 0.0
    shift = (float(np.median(heatmap.grid)) - stats.mu_clean) / stats.sigma_clean
    return float(min(1.0, max(-1.0, shift)))


def dynamic_threshold(stats: CleanEntropyStats, w_tolerance: float = DEFAULT_W_TOLERANCE, w_image: float = 0.0) -> ThresholdParams:
    w_image = min(1.0, max(-1.0, float(w_image)))
    thr = stats.mu_clean + (w_tolerance + w_image) * stats.sigma_clean
    return ThresholdParams(w_tolerance=float(w_tolerance), w_image=w_image, thr=thr)
