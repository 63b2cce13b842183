"""Patch masks grown from entropy peaks by mutual-information similarity.

An alternative to the autoencoder for deployments without a trained model
or clean-data statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from jedi_defense.entropy import EntropyHeatmap
from jedi_defense.errors import FormatError
from jedi_defense.imagecore import to_gray
from jedi_defense.kernels import KernelMap, kernels_to_mask, peak_extract


@dataclass(frozen=True)
class MIConfig:
    k_percent: float = 10.0
    radius: int = 2
    mi_ratio_threshold: float = 0.5
    bins: int = 32
    # peaks must also exceed this entropy; keeps flat images from producing kernels
    min_entropy: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.k_percent < 100.0:
            raise ValueError("k_percent must be in (0, 100)")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not 0.0 < self.mi_ratio_threshold <= 1.0:
            raise ValueError("mi_ratio_threshold must be in (0, 1]")
        if self.bins < 2 or self.bins > 256 or self.bins & (self.bins - 1):
            raise ValueError("bins must be a power of two in [2, 256]")


def quantize(values: np.ndarray, bins: int) -> np.ndarray:
    return (np.asarray(values, dtype=np.int64) * bins) // 256


def _entropy(counts: np.ndarray, n: int) -> float:
    c = counts[counts > 0].astype(np.float64)
    return max(0.0, math.log2(n) - float(np.sum(c * np.log2(c))) / n)


def quantized_entropy(window: np.ndarray, bins: int = 32) -> float:
    q = quantize(window, bins).ravel()
    return _entropy(np.bincount(q, minlength=bins), q.size)


def mutual_info(window_a: np.ndarray, window_b: np.ndarray, bins: int = 32) -> float:
    """Plug-in mutual information (bits) of co-located pixel pairs after quantisation."""
    a = np.asarray(window_a)
    b = np.asarray(window_b)
    if a.shape != b.shape:
        raise FormatError(f"window shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty window")
    qa = quantize(a, bins).ravel()
    qb = quantize(b, bins).ravel()
    n = qa.size
    h_a = _entropy(np.bincount(qa, minlength=bins), n)
    h_b = _entropy(np.bincount(qb, minlength=bins), n)
    h_ab = _entropy(np.bincount(qa * bins + qb, minlength=bins * bins), n)
    return max(0.0, h_a + h_b - h_ab)


def expand_kernel_map(image: np.ndarray, heatmap: EntropyHeatmap, config: MIConfig | None = None) -> KernelMap:
    """Peak kernels plus every neighbour within ``radius`` cells whose MI ratio beats the threshold."""
    config = config or MIConfig()
    gray = to_gray(image)
    if gray.shape != heatmap.source_shape:
        raise FormatError("heatmap was not computed on this image")
    peaks = peak_extract(heatmap, config.k_percent).grid & (heatmap.grid > config.min_entropy)
    win, stride = heatmap.geometry.window, heatmap.geometry.stride
    gh, gw = heatmap.grid.shape
    chosen = peaks.copy()

    def window_at(i, j):
        return gray[i * stride : i * stride + win, j * stride : j * stride + win]

    r = config.radius
    for i, j in zip(*np.nonzero(peaks)):
        ref = window_at(i, j)
        self_mi = quantized_entropy(ref, config.bins)
        if self_mi <= 0.0:
            continue
        for ci in range(max(0, i - r), min(gh, i + r + 1)):
            for cj in range(max(0, j - r), min(gw, j + r + 1)):
                if chosen[ci, cj]:
                    continue
                ratio = mutual_info(ref, window_at(ci, cj), config.bins) / self_mi
                if ratio > config.mi_ratio_threshold:
                    chosen[ci, cj] = True
    return KernelMap(grid=chosen, geometry=heatmap.geometry, source_shape=heatmap.source_shape)


def expand_kernels(image: np.ndarray, heatmap: EntropyHeatmap, config: MIConfig | None = None) -> np.ndarray:
    return kernels_to_mask(expand_kernel_map(image, heatmap, config))
