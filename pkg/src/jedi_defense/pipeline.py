"""The full defense: heatmap, dynamic threshold, scatter filter, masker, inpainting."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from jedi_defense.entropy import (
    DEFAULT_W_TOLERANCE,
    CleanEntropyStats,
    EntropyHeatmap,
    WindowGeometry,
    auto_geometry,
    compute_heatmap,
    compute_w_image,
    dynamic_threshold,
)
from jedi_defense.errors import JediError, StageError
from jedi_defense.imagecore import check_image
from jedi_defense.inpaint import InpaintConfig, inpaint
from jedi_defense.kernels import DEFAULT_MIN_CELLS, KernelMap, filter_scattered, kernels_to_mask, threshold_heatmap
from jedi_defense.mask_ae import SparseAEModel, refine_mask
from jedi_defense.mask_mi import MIConfig, expand_kernel_map

log = logging.getLogger(__name__)

MASKERS = ("ae", "mi")


@dataclass(frozen=True)
class DefenseConfig:
    w_tolerance: float = DEFAULT_W_TOLERANCE
    min_cells: int = DEFAULT_MIN_CELLS
    masker: str = "ae"
    geometry: WindowGeometry | None = None
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    mi: MIConfig = field(default_factory=MIConfig)

    def __post_init__(self):
        if self.masker not in MASKERS:
            raise ValueError(f"masker must be one of {MASKERS}, got {self.masker!r}")


@dataclass
class DefenseResult:
    image: np.ndarray
    mask: np.ndarray
    heatmap: EntropyHeatmap
    kernels: KernelMap
    summary: dict


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.start
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


class JediDefense:
    """Callable defense; ``defense(image)`` returns ``(repaired, mask)``."""

    def __init__(self, stats: CleanEntropyStats | None, model: SparseAEModel | None = None, config: DefenseConfig | None = None):
        self.config = config or DefenseConfig()
        if self.config.masker == "ae" and (stats is None or model is None):
            raise JediError("the ae masker needs clean statistics and a trained model")
        self.stats = stats
        self.model = model

    def geometry_for(self, image: np.ndarray) -> WindowGeometry:
        if self.config.geometry is not None:
            return self.config.geometry
        h, w = image.shape[:2]
        geometry = auto_geometry(w, h)
        if self.stats is not None and self.stats.geometry != geometry:
            log.warning("auto geometry %s differs from clean-stats geometry %s", geometry, self.stats.geometry)
        return geometry

    def run(self, image: np.ndarray) -> DefenseResult:
        timings: dict[str, float] = {}
        summary: dict = {"masker": self.config.masker, "timings": timings}
        with _Stage("input", timings):
            check_image(image)
            geometry = self.geometry_for(image)
        with _Stage("heatmap", timings):
            heatmap = compute_heatmap(image, geometry)
        summary.update(window=geometry.window, stride=geometry.stride)

        if self.config.masker == "ae":
            with _Stage("threshold", timings):
                w_image = compute_w_image(heatmap, self.stats)
                params = dynamic_threshold(self.stats, self.config.w_tolerance, w_image)
                raw = threshold_heatmap(heatmap, params.thr)
            with _Stage("scatter_filter", timings):
                kernels = filter_scattered(raw, self.config.min_cells)
            with _Stage("masker", timings):
                if kernels.count == 0:
                    mask = np.zeros(image.shape[:2], dtype=bool)
                else:
                    mask = refine_mask(self.model, kernels)
            summary.update(thr=params.thr, w_image=params.w_image, w_tolerance=params.w_tolerance)
        else:
            with _Stage("masker", timings):
                raw = expand_kernel_map(image, heatmap, self.config.mi)
            with _Stage("scatter_filter", timings):
                kernels = filter_scattered(raw, self.config.min_cells)
                mask = kernels_to_mask(kernels)
            summary.update(thr=None, w_image=None, w_tolerance=None)

        with _Stage("inpaint", timings):
            repaired = inpaint(image, mask, self.config.inpaint) if mask.any() else image.copy()
        summary.update(
            raw_kernel_count=raw.count,
            kernel_count=kernels.count,
            mask_area=int(mask.sum()),
        )
        return DefenseResult(image=repaired, mask=mask, heatmap=heatmap, kernels=kernels, summary=summary)

    def __call__(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        result = self.run(image)
        return result.image, result.mask


def mask_defense(mask_fn, inpaint_config: InpaintConfig | None = None):
    """Defense that inpaints whatever mask ``mask_fn(image)`` returns."""

    def defend(image: np.ndarray):
        mask = mask_fn(image)
        repaired = inpaint(image, mask, inpaint_config) if mask.any() else image.copy()
        return repaired, mask

    return defend
