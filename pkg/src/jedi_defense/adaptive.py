"""Entropy-budgeted adaptive patch generation.

Patch improvement steps alternate with a projection into the low-entropy
set: colors are merged into their nearest remaining neighbour (Euclidean
distance) until the grayscale histogram entropy is within budget, each
round keeping the merge that best preserves attack success.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from jedi_defense.entropy import local_entropy
from jedi_defense.errors import JediError, OracleError
from jedi_defense.imagecore import Patch, apply_patch, random_location, to_gray


@dataclass(frozen=True)
class AdaptiveConfig:
    epsilon: float = 5.0
    check_freq: int = 10
    n_colors: int = 10
    n_epochs: int = 3
    seed: int = 0
    patch_size: int = 50
    channels: int = 1

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 8.0:
            raise ValueError("epsilon must be in [0, 8]")
        if self.check_freq < 1:
            raise ValueError("check_freq must be >= 1")
        if self.n_colors < 1:
            raise ValueError("n_colors must be >= 1")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


class AttackOracle(Protocol):
    def success_rate(self, patch: Patch, samples: Sequence[np.ndarray]) -> float: ...

    def improve(self, patch: Patch, samples: Sequence[np.ndarray]) -> Patch: ...


def patch_entropy(patch: Patch) -> float:
    return local_entropy(to_gray(patch.pixels))


def _color_rows(pixels: np.ndarray) -> np.ndarray:
    return pixels.reshape(-1, 1) if pixels.ndim == 2 else pixels.reshape(-1, pixels.shape[2])


def color_entropy(patch: Patch) -> float:
    """Entropy in bits of the distinct-color histogram.

    Equals ``patch_entropy`` on grayscale patches and bounds it from above on
    RGB patches. Every color merge is non-increasing in this quantity; the
    grayscale entropy of an RGB patch can rise when a merge moves a color into
    a luma bin shared with other colors.
    """
    _, counts = np.unique(_color_rows(patch.pixels), axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(max(0.0, -np.sum(p * np.log2(p))))


def distinct_colors(patch: Patch) -> np.ndarray:
    """Distinct colors as rows, in lexicographic order."""
    return np.unique(_color_rows(patch.pixels), axis=0)


def find_nearest_color(patch: Patch, target) -> np.ndarray:
    """The other color in ``patch`` closest to ``target``; ties go to the lexicographically smallest."""
    colors = distinct_colors(patch)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if colors.shape[0] < 2:
        raise JediError("patch has a single color; nothing to merge into")
    if target.shape[0] != colors.shape[1]:
        raise ValueError(f"target has {target.shape[0]} channels, patch has {colors.shape[1]}")
    others = colors[np.any(colors != target, axis=1)]
    d2 = np.sum((others.astype(np.int64) - target) ** 2, axis=1)
    # np.unique sorted the rows, so argmin's first hit is the lexicographic winner
    return others[int(np.argmin(d2))]


def replace_color(patch: Patch, color, new_color) -> Patch:
    rows = _color_rows(patch.pixels).copy()
    color = np.atleast_1d(np.asarray(color))
    hit = np.all(rows == color, axis=1)
    rows[hit] = np.atleast_1d(np.asarray(new_color))
    return Patch(rows.reshape(patch.pixels.shape).astype(np.uint8), id=patch.id)


def reduce_entropy(patch: Patch, color_list, oracle: AttackOracle, samples: Sequence[np.ndarray]) -> Patch:
    """Try merging each listed color into its nearest neighbour; keep the best-scoring candidate."""
    present = {tuple(c) for c in distinct_colors(patch).tolist()}
    if len(present) < 2:
        raise JediError("patch has a single color; entropy cannot be reduced")
    best, best_score = None, -np.inf
    for color in color_list:
        key = tuple(np.atleast_1d(np.asarray(color)).tolist())
        if key not in present:
            continue
        candidate = replace_color(patch, key, find_nearest_color(patch, key))
        score = oracle.success_rate(candidate, samples)
        if score > best_score:
            best, best_score = candidate, score
    if best is None:
        raise JediError("none of the listed colors is present in the patch")
    return best


@dataclass
class TraceEntry:
    iteration: int
    epoch: int
    entropy: float
    success_rate: float
    projected: bool

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "epoch": self.epoch,
            "entropy": self.entropy,
            "success_rate": self.success_rate,
            "projected": self.projected,
        }


def project(patch: Patch, epsilon: float, n_colors: int, oracle: AttackOracle, samples, rng: np.random.Generator) -> Patch:
    """Merge colors until the patch entropy is at most ``epsilon``."""
    while patch_entropy(patch) > epsilon:
        colors = distinct_colors(patch)
        pick = rng.choice(colors.shape[0], size=min(n_colors, colors.shape[0]), replace=False)
        patch = reduce_entropy(patch, colors[pick], oracle, samples)
    return patch


def generate_low_entropy_patch(
    oracle: AttackOracle,
    config: AdaptiveConfig,
    samples: Sequence[np.ndarray],
    initial: Patch | None = None,
) -> tuple[Patch, list[TraceEntry]]:
    """Alternate ``oracle.improve`` with entropy projection every ``check_freq`` iterations.

    One iteration per training sample per epoch. The returned patch always
    satisfies the budget; the trace records every iteration.
    """
    rng = np.random.default_rng(config.seed)
    if initial is None:
        shape = (config.patch_size, config.patch_size)
        if config.channels != 1:
            shape += (config.channels,)
        initial = Patch(np.full(shape, 127, dtype=np.uint8), id="adaptive")
    patch = initial
    trace: list[TraceEntry] = []
    it = 0
    for epoch in range(1, config.n_epochs + 1):
        for _ in samples:
            patch = oracle.improve(patch, samples)
            it += 1
            projected = False
            if it % config.check_freq == 0 and patch_entropy(patch) > config.epsilon:
                patch = project(patch, config.epsilon, config.n_colors, oracle, samples, rng)
                projected = True
            trace.append(TraceEntry(it, epoch, patch_entropy(patch), oracle.success_rate(patch, samples), projected))
    if patch_entropy(patch) > config.epsilon:
        patch = project(patch, config.epsilon, config.n_colors, oracle, samples, rng)
        trace.append(TraceEntry(it, config.n_epochs, patch_entropy(patch), oracle.success_rate(patch, samples), True))
    return patch, trace


class ToyAttackOracle:
    """Success against a label oracle, improved by seeded random block mutations.

    ``success_rate`` pastes the patch at one fixed random location per sample
    and counts label changes relative to the clean prediction. ``improve``
    proposes ``proposals`` noise-block mutations and keeps each one that does
    not lower the success rate. Mutation values are drawn from ``levels``
    evenly spaced intensities.
    """

    def __init__(self, model, seed: int = 0, proposals: int = 20, block: tuple[int, int] = (4, 16), levels: int = 64):
        self.model = model
        self.seed = seed
        self.proposals = proposals
        self.block = block
        self.levels = levels
        self._rng = np.random.default_rng(seed)
        self._clean: dict[int, tuple[str, tuple[int, int]]] = {}

    def _clean_info(self, index: int, image: np.ndarray, patch: Patch):
        key = index
        if key not in self._clean:
            loc_rng = np.random.default_rng([self.seed, index])
            self._clean[key] = (self._predict(image, index), random_location(image.shape, patch, loc_rng))
        return self._clean[key]

    def _predict(self, image, index):
        try:
            return self.model.predict(image)
        except OracleError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise OracleError(f"oracle failed: {exc}", sample_id=index) from exc

    def success_rate(self, patch: Patch, samples: Sequence[np.ndarray]) -> float:
        if len(samples) == 0:
            raise ValueError("no samples")
        hits = 0
        for index, image in enumerate(samples):
            clean_label, loc = self._clean_info(index, image, patch)
            adv, _ = apply_patch(image, patch, loc)
            hits += self._predict(adv, index) != clean_label
        return hits / len(samples)

    def _mutate(self, patch: Patch) -> Patch:
        pix = patch.pixels.copy()
        h, w = pix.shape[:2]
        lo, hi = self.block
        bh = int(self._rng.integers(lo, min(hi, h) + 1)) if h >= lo else h
        bw = int(self._rng.integers(lo, min(hi, w) + 1)) if w >= lo else w
        y = int(self._rng.integers(0, h - bh + 1))
        x = int(self._rng.integers(0, w - bw + 1))
        shape = (bh, bw) + pix.shape[2:]
        step = 256 // self.levels
        pix[y : y + bh, x : x + bw] = (self._rng.integers(0, self.levels, size=shape) * step).astype(np.uint8)
        return Patch(pix, id=patch.id)

    def improve(self, patch: Patch, samples: Sequence[np.ndarray]) -> Patch:
        score = self.success_rate(patch, samples)
        for _ in range(self.proposals):
            candidate = self._mutate(patch)
            cand_score = self.success_rate(candidate, samples)
            if cand_score >= score:
                patch, score = candidate, cand_score
        return patch
