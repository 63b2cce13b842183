"""Defense evaluation metrics and the clean/attacked/defended harness."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from jedi_defense.errors import FormatError, OracleError, UndefinedRateError
from jedi_defense.imagecore import Patch, apply_patch, random_location

REPORT_SCHEMA = "jedi-report/1"
RATE_FIELDS = (
    "clean_accuracy",
    "adversarial_accuracy",
    "robust_accuracy",
    "patch_success_rate",
    "patch_detection_rate",
    "recovery_rate",
    "lost_prediction_rate",
)


@dataclass(frozen=True)
class TrialRecord:
    sample_id: str
    ground_truth: str
    label_clean: str
    label_adv: str
    label_def: str
    iou: float | None = None
    location: tuple[int, int] | None = None

    def __post_init__(self):
        if self.iou is not None and not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou {self.iou} outside [0, 1]")

    @property
    def clean_correct(self) -> bool:
        return self.label_clean == self.ground_truth

    @property
    def attack_succeeded(self) -> bool:
        return self.clean_correct and self.label_adv != self.label_clean

    @property
    def attack_failed(self) -> bool:
        return self.clean_correct and self.label_adv == self.ground_truth


@dataclass
class EvalReport:
    clean_accuracy: float | None
    adversarial_accuracy: float | None
    robust_accuracy: float | None
    patch_success_rate: float | None
    patch_detection_rate: float | None
    recovery_rate: float | None
    lost_prediction_rate: float | None
    denominators: dict[str, int]
    counts: dict[str, int]
    records: list[TrialRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"schema": REPORT_SCHEMA}
        for name in RATE_FIELDS:
            out[name] = getattr(self, name)
        out["denominators"] = dict(self.denominators)
        out["counts"] = dict(self.counts)
        out["records"] = [
            {**asdict(r), "location": list(r.location) if r.location is not None else None} for r in self.records
        ]
        return out

    def save(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    def table(self) -> str:
        lines = [f"{'metric':<24}{'value':>10}{'denominator':>14}"]
        for name in RATE_FIELDS:
            value = getattr(self, name)
            shown = "n/a" if value is None else f"{100.0 * value:.2f}%"
            lines.append(f"{name:<24}{shown:>10}{self.denominators[name]:>14}")
        return "\n".join(lines)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise FormatError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def _rate(hits: int, total: int, name: str) -> float:
    if total == 0:
        raise UndefinedRateError(f"{name}: empty denominator")
    return hits / total


def patch_detection_rate(records: Sequence[TrialRecord]) -> float:
    scored = [r for r in records if r.iou is not None]
    return _rate(sum(r.iou > 0.5 for r in scored), len(scored), "patch_detection_rate")


def recovery_rate(records: Sequence[TrialRecord]) -> float:
    """Share of successful attacks whose correct label the defense restores."""
    success = [r for r in records if r.attack_succeeded]
    return _rate(sum(r.label_def == r.ground_truth for r in success), len(success), "recovery_rate")


def lost_prediction_rate(records: Sequence[TrialRecord]) -> float:
    """Share of attacks that failed whose correct label the defense then breaks."""
    failed = [r for r in records if r.attack_failed]
    return _rate(sum(r.label_def != r.ground_truth for r in failed), len(failed), "lost_prediction_rate")


def report_from_records(records: Sequence[TrialRecord]) -> EvalReport:
    """Build the full report; rates with an empty denominator are ``None``."""
    records = list(records)
    n = len(records)
    clean_ok = [r for r in records if r.clean_correct]
    scored = [r for r in records if r.iou is not None]
    success = [r for r in records if r.attack_succeeded]
    failed = [r for r in records if r.attack_failed]

    def safe(fn, *args):
        try:
            return fn(*args)
        except UndefinedRateError:
            return None

    denominators = {
        "clean_accuracy": n,
        "adversarial_accuracy": n,
        "robust_accuracy": n,
        "patch_success_rate": len(clean_ok),
        "patch_detection_rate": len(scored),
        "recovery_rate": len(success),
        "lost_prediction_rate": len(failed),
    }
    counts = {
        "trials": n,
        "clean_correct": len(clean_ok),
        "adversarial_correct": sum(r.label_adv == r.ground_truth for r in records),
        "robust_correct": sum(r.label_def == r.ground_truth for r in records),
        "successful_attacks": len(success),
        "failed_attacks": len(failed),
        "detected_patches": sum(r.iou > 0.5 for r in scored),
        "recovered": sum(r.label_def == r.ground_truth for r in success),
        "lost": sum(r.label_def != r.ground_truth for r in failed),
        # over all trials, so that robust - adversarial == (restored - broken) / trials
        "restored_any": sum(r.label_adv != r.ground_truth and r.label_def == r.ground_truth for r in records),
        "broken_any": sum(r.label_adv == r.ground_truth and r.label_def != r.ground_truth for r in records),
    }
    return EvalReport(
        clean_accuracy=safe(_rate, counts["clean_correct"], n, "clean_accuracy"),
        adversarial_accuracy=safe(_rate, counts["adversarial_correct"], n, "adversarial_accuracy"),
        robust_accuracy=safe(_rate, counts["robust_correct"], n, "robust_accuracy"),
        patch_success_rate=safe(_rate, len(success), len(clean_ok), "patch_success_rate"),
        patch_detection_rate=safe(patch_detection_rate, records),
        recovery_rate=safe(recovery_rate, records),
        lost_prediction_rate=safe(lost_prediction_rate, records),
        denominators=denominators,
        counts=counts,
        records=records,
    )


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: str


def _predict(oracle, image: np.ndarray, sample_id) -> str:
    try:
        return str(oracle.predict(image))
    except OracleError as exc:
        if exc.sample_id is None:
            exc.sample_id = sample_id
        raise
    except Exception as exc:  # noqa: BLE001 - any backend failure aborts the run
        raise OracleError(f"oracle failed on sample {sample_id}: {exc}", sample_id=sample_id) from exc


def evaluate(
    dataset: Sequence[Sample],
    patch: Patch,
    oracle,
    defense: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    seed: int = 0,
) -> EvalReport:
    """Clean, attacked and defended inference for every sample.

    ``defense`` maps an image to ``(repaired_image, predicted_mask)``. Patch
    locations are drawn from one generator seeded by ``seed``, in sample order.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    records = []
    for sample in dataset:
        loc = random_location(sample.image.shape, patch, rng)
        adv, gt_mask = apply_patch(sample.image, patch, loc)
        repaired, pred_mask = defense(adv)
        records.append(
            TrialRecord(
                sample_id=str(sample.id),
                ground_truth=sample.label,
                label_clean=_predict(oracle, sample.image, sample.id),
                label_adv=_predict(oracle, adv, sample.id),
                label_def=_predict(oracle, repaired, sample.id),
                iou=iou(pred_mask, gt_mask),
                location=loc,
            )
        )
    return report_from_records(records)


def identity_defense(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image, np.zeros(image.shape[:2], dtype=bool)
