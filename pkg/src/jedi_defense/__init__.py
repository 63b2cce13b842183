"""Entropy-based localization and removal of adversarial patches."""

from jedi_defense.entropy import (
    CleanEntropyStats,
    EntropyHeatmap,
    ThresholdParams,
    WindowGeometry,
    auto_geometry,
    auto_stride,
    auto_window_size,
    compute_heatmap,
    compute_w_image,
    dynamic_threshold,
    fit_clean_stats,
    local_entropy,
)
from jedi_defense.imagecore import (
    FormatError,
    Patch,
    PlacementError,
    apply_patch,
    gen_noise_patch,
    gen_scene,
    gen_smooth_scene,
    load_image,
    save_image,
    to_gray,
)
from jedi_defense.inpaint import InpaintConfig, inpaint
from jedi_defense.kernels import KernelMap, filter_scattered, kernels_to_mask, peak_extract, threshold_heatmap
from jedi_defense.mask_ae import SparseAEModel, generate_training_masks, refine_mask, train_sae
from jedi_defense.mask_mi import MIConfig, expand_kernels, mutual_info
from jedi_defense.metrics import EvalReport, Sample, TrialRecord, evaluate, identity_defense, iou
from jedi_defense.oracle import SubprocessOracle, ToyOracle
from jedi_defense.adaptive import AdaptiveConfig, ToyAttackOracle, color_entropy, generate_low_entropy_patch, patch_entropy
from jedi_defense.pipeline import DefenseConfig, DefenseResult, JediDefense

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig",
    "CleanEntropyStats",
    "DefenseConfig",
    "DefenseResult",
    "EntropyHeatmap",
    "EvalReport",
    "FormatError",
    "InpaintConfig",
    "JediDefense",
    "KernelMap",
    "MIConfig",
    "Patch",
    "PlacementError",
    "Sample",
    "SparseAEModel",
    "SubprocessOracle",
    "ThresholdParams",
    "ToyAttackOracle",
    "ToyOracle",
    "TrialRecord",
    "WindowGeometry",
    "apply_patch",
    "auto_geometry",
    "auto_stride",
    "auto_window_size",
    "compute_heatmap",
    "compute_w_image",
    "dynamic_threshold",
    "evaluate",
    "expand_kernels",
    "filter_scattered",
    "fit_clean_stats",
    "gen_noise_patch",
    "gen_scene",
    "gen_smooth_scene",
    "generate_low_entropy_patch",
    "generate_training_masks",
    "identity_defense",
    "inpaint",
    "iou",
    "kernels_to_mask",
    "load_image",
    "local_entropy",
    "mutual_info",
    "color_entropy",
    "patch_entropy",
    "peak_extract",
    "refine_mask",
    "save_image",
    "threshold_heatmap",
    "to_gray",
    "train_sae",
]
