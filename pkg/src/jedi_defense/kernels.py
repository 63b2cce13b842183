"""High-entropy kernel maps: thresholding, scatter filtering, peaks, and projection to pixel masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from jedi_defense.entropy import EntropyHeatmap, WindowGeometry

DEFAULT_MIN_CELLS = 4
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class KernelMap:
    grid: np.ndarray
    geometry: WindowGeometry
    source_shape: tuple[int, int]

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    def with_grid(self, grid: np.ndarray) -> "KernelMap":
        return KernelMap(grid=np.asarray(grid, dtype=bool), geometry=self.geometry, source_shape=self.source_shape)


def threshold_heatmap(heatmap: EntropyHeatmap, thr: float) -> KernelMap:
    """Keep cells strictly above ``thr``."""
    return KernelMap(grid=heatmap.grid > thr, geometry=heatmap.geometry, source_shape=heatmap.source_shape)


def filter_scattered(kernels: KernelMap, min_cells: int = DEFAULT_MIN_CELLS) -> KernelMap:
    """Clear 8-connected clusters with fewer than ``min_cells`` cells."""
    if min_cells < 1:
        raise ValueError("min_cells must be >= 1")
    labels, n = ndimage.label(kernels.grid, structure=_EIGHT_CONNECTED)
    if n == 0:
        return kernels.with_grid(kernels.grid.copy())
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_cells
    keep[0] = False
    return kernels.with_grid(keep[labels])


def kernels_to_mask(kernels: KernelMap) -> np.ndarray:
    """Union of the window footprints of all true cells, at image resolution."""
    h, w = kernels.source_shape
    win, stride = kernels.geometry.window, kernels.geometry.stride
    mask = np.zeros((h, w), dtype=bool)
    for i, j in zip(*np.nonzero(kernels.grid)):
        y, x = i * stride, j * stride
        mask[y : y + win, x : x + win] = True
    return mask


def peak_extract(heatmap: EntropyHeatmap, k_percent: float) -> KernelMap:
    """Cells within ``k_percent`` percent of the heatmap maximum (``>= (1 - k/100) * max``)."""
    if not 0.0 < k_percent < 100.0:
        raise ValueError("k_percent must be in (0, 100)")
    if heatmap.grid.size == 0:
        raise ValueError("empty heatmap")
    cut = (1.0 - k_percent / 100.0) * float(heatmap.grid.max())
    return KernelMap(grid=heatmap.grid >= cut, geometry=heatmap.geometry, source_shape=heatmap.source_shape)


def kernel_map_image(kernels: KernelMap) -> np.ndarray:
    """Grid upscaled by the stride (one ``stride x stride`` block per cell), 0/255."""
    s = kernels.geometry.stride
    up = np.kron(kernels.grid.astype(np.uint8), np.ones((s, s), dtype=np.uint8))
    return (up * 255).astype(np.uint8)
