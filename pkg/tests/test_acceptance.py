"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from jedi_defense.adaptive import (
    AdaptiveConfig,
    ToyAttackOracle,
    distinct_colors,
    generate_low_entropy_patch,
    patch_entropy,
    reduce_entropy,
)
from jedi_defense.entropy import (
    CleanEntropyStats,
    WindowGeometry,
    auto_stride,
    auto_window_size,
    compute_heatmap,
    dynamic_threshold,
    local_entropy,
)
from jedi_defense.imagecore import Patch, apply_patch, gen_noise_patch, gen_scene, gen_smooth_scene, random_location
from jedi_defense.inpaint import inpaint
from jedi_defense.kernels import kernels_to_mask, peak_extract
from jedi_defense.mask_ae import PARAM_NAMES, generate_training_masks, init_model, loss_and_grads, train_sae
from jedi_defense.mask_mi import expand_kernels, mutual_info, quantized_entropy
from jedi_defense.metrics import RATE_FIELDS, TrialRecord, iou, report_from_records
from jedi_defense.oracle import ToyOracle
from jedi_defense.pipeline import DefenseConfig, JediDefense

from tests import oracles
from tests.test_inpaint import convexity_violations, random_mask
from tests.test_metrics import FIXTURES

# calibrated on the synthetic corpus, whose clean sigma is narrow; see the decisions ledger
E2E_W_TOLERANCE = 6.0


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, detail

    return emit


def test_01_entropy_separation(verdict):
    t0 = time.perf_counter()
    noise = [local_entropy(gen_noise_patch(50, seed=i).pixels) for i in range(200)]
    smooth = []
    for i in range(200):
        scene = gen_smooth_scene(224, 224, seed=i)
        rng = np.random.default_rng(i)
        y, x = (int(v) for v in rng.integers(0, 224 - 50, 2))
        smooth.append(local_entropy(scene[y : y + 50, x : x + 50]))
    ratio = np.mean(noise) / np.mean(smooth)
    elapsed = time.perf_counter() - t0
    verdict(1, "entropy separation", ratio >= 1.3 and elapsed < 30, f"ratio {ratio:.3f} >= 1.3, {elapsed:.1f}s < 30s")


def test_02_heatmap_oracle_equivalence(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(20):
        img = rng.integers(0, 256, (64, 64), dtype=np.uint8) if k % 2 else gen_scene(64, 64, seed=k).image
        for g in (WindowGeometry(8, 4), WindowGeometry(8, 8), WindowGeometry(12, 5)):
            got = compute_heatmap(img, g).grid
            want = np.array(oracles.heatmap(img.tolist(), g.window, g.stride))
            assert got.shape == want.shape
            worst = max(worst, float(np.max(np.abs(got - want))))
    verdict(2, "heatmap oracle equivalence", worst <= 1e-12, f"max deviation {worst:.2e} <= 1e-12")


def test_03_threshold_exactness(verdict):
    geo = WindowGeometry(8, 4)

    def thr(mu, sigma, wt, wi):
        return dynamic_threshold(CleanEntropyStats(mu, sigma, 100, geo), wt, wi).thr

    cases = [
        (thr(4.0, 1.0, 1.0, 0.5), 5.5),
        (thr(2.5, 0.5, 2.0, -1.0), 3.0),
        (thr(1.0, 0.0, 3.0, 1.0), 1.0),
        (thr(0.75, 0.25, 0.0, 0.0), 0.75),
        (thr(3.0, 2.0, 1.5, 0.25), 3.0 + (1.5 + 0.25) * 2.0),
    ]
    ok = all(got == want for got, want in cases)
    verdict(3, "dynamic threshold exactness", ok, f"{sum(g == w for g, w in cases)}/{len(cases)} exact")


def test_04_window_sizing(verdict):
    got = (auto_window_size(2000, 1500), auto_window_size(300, 200), auto_stride(8))
    verdict(4, "window sizing", got == (20, 8, 4), f"got {got}, want (20, 8, 4)")


def test_05_end_to_end_localization(verdict, trained_model, clean_stats):
    defense = JediDefense(clean_stats, trained_model, DefenseConfig(w_tolerance=E2E_W_TOLERANCE, geometry=clean_stats.geometry))
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    scores = []
    for k in range(100):
        scene = gen_smooth_scene(224, 224, seed=k)
        patch = gen_noise_patch(50, seed=k)
        adv, gt = apply_patch(scene, patch, random_location(scene.shape, patch, rng))
        _, mask = defense(adv)
        scores.append(iou(mask, gt))
    elapsed = time.perf_counter() - t0
    scores = np.array(scores)
    hits = int((scores > 0.5).sum())
    ok = hits >= 90 and scores.mean() >= 0.6 and elapsed < 300
    verdict(5, "end-to-end synthetic localization", ok, f"{hits}/100 trials IoU>0.5 (need 90), mean IoU {scores.mean():.3f} (need 0.6), {elapsed:.0f}s")


def test_06_gradient_check(verdict):
    rng = np.random.default_rng(6)
    model = init_model(5, hidden=6, seed=6)
    x = (rng.random((10, 25)) < 0.4).astype(float)
    y = (rng.random((10, 25)) < 0.4).astype(float)
    _, grads = loss_and_grads(model, x, y)
    params = model.params()
    worst = 0.0
    eps = 1e-5
    for name in PARAM_NAMES:
        for idx in np.ndindex(params[name].shape):
            plus, minus = params[name].copy(), params[name].copy()
            plus[idx] += eps
            minus[idx] -= eps
            lp, _ = loss_and_grads(model.replace_params({**params, name: plus}), x, y)
            lm, _ = loss_and_grads(model.replace_params({**params, name: minus}), x, y)
            num = (lp - lm) / (2 * eps)
            a = grads[name][idx]
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), 1e-8))
    trained = train_sae(generate_training_masks(100, grid=5, seed=6), epochs=200, seed=6, hidden=6)
    monotone = bool(np.all(np.diff(trained.history) <= 0))
    verdict(6, "autoencoder gradient check", worst < 1e-4 and monotone, f"max relative error {worst:.2e} < 1e-4, loss monotone={monotone}")


def test_07_inpainting_properties(verdict):
    const_ok = True
    idem_ok = True
    rng = np.random.default_rng(7)
    for k in range(10):
        c = np.full((48, 48), int(rng.integers(0, 256)), np.uint8)
        m = random_mask(rng, c.shape)
        const_ok &= bool(np.array_equal(inpaint(c, m), c))
        img = gen_scene(48, 48, seed=k).image
        idem_ok &= bool(np.array_equal(inpaint(img, np.zeros_like(m)), img))
    violations = 0
    for k in range(50):
        img = gen_scene(64, 64, seed=300 + k).image
        img = np.clip(img.astype(int) + rng.integers(-20, 21, img.shape), 0, 255).astype(np.uint8)
        m = random_mask(rng, img.shape)
        violations += convexity_violations(img, m, inpaint(img, m), 5)
    ok = const_ok and idem_ok and violations == 0
    verdict(7, "inpainting properties", ok, f"constant exact={const_ok}, empty-mask identity={idem_ok}, convexity violations={violations}")


# (y0, y1, x0, x1) rectangles on a 12x12 grid; None is an empty mask
MASK_PAIRS = [
    ((0, 4, 0, 4), (0, 4, 0, 4)),
    ((0, 4, 0, 4), (2, 6, 2, 6)),
    ((0, 4, 0, 4), (4, 8, 4, 8)),
    ((0, 12, 0, 12), (3, 9, 3, 9)),
    ((1, 2, 1, 2), (1, 2, 1, 2)),
    (None, None),
    (None, (0, 1, 0, 1)),
    ((0, 6, 0, 12), (6, 12, 0, 12)),
    ((0, 7, 0, 12), (5, 12, 0, 12)),
    ((2, 10, 2, 10), (3, 10, 2, 10)),
    ((0, 3, 0, 9), (0, 9, 0, 3)),
    ((5, 6, 0, 12), (0, 12, 5, 6)),
    ((0, 5, 0, 5), (1, 6, 1, 6)),
    ((0, 5, 0, 5), (0, 5, 1, 6)),
    ((4, 8, 4, 8), (0, 12, 0, 12)),
    ((0, 2, 0, 2), (10, 12, 10, 12)),
    ((3, 9, 3, 9), (4, 8, 4, 8)),
    ((0, 10, 0, 10), (1, 11, 1, 11)),
    ((0, 12, 0, 6), (0, 12, 3, 9)),
    ((6, 12, 6, 12), (5, 11, 5, 11)),
    ((0, 1, 0, 12), (0, 1, 0, 6)),
    ((2, 4, 2, 9), (3, 8, 5, 7)),
    ((0, 8, 0, 8), (4, 12, 4, 12)),
    ((1, 11, 1, 11), (2, 10, 2, 10)),
    ((0, 6, 0, 6), None),
]


def rect_mask(r):
    m = np.zeros((12, 12), bool)
    if r is not None:
        m[r[0] : r[1], r[2] : r[3]] = True
    return m


def test_08_metrics_oracle(verdict):
    mismatches = 0
    for ra, rb in MASK_PAIRS:
        a, b = rect_mask(ra), rect_mask(rb)
        mismatches += iou(a, b) != oracles.iou(a.tolist(), b.tolist())
    for k in range(1, len(FIXTURES) + 1):
        recs = [TrialRecord(str(i), *row) for i, row in enumerate(FIXTURES[:k])]
        rep = report_from_records(recs)
        want = oracles.tally(
            [{"ground_truth": r.ground_truth, "label_clean": r.label_clean, "label_adv": r.label_adv, "label_def": r.label_def, "iou": r.iou} for r in recs]
        )
        mismatches += sum(getattr(rep, f) != want[f] for f in RATE_FIELDS)
    verdict(8, "metrics oracle", mismatches == 0, f"{len(MASK_PAIRS)} IoU pairs and {len(FIXTURES)} trial fixtures, {mismatches} mismatches")


class _Fixed:
    def success_rate(self, patch, samples):
        return 0.0


def test_09_adaptive_attack(verdict):
    rng = np.random.default_rng(9)
    violations = 0
    for _ in range(100):
        levels = int(rng.integers(2, 64))
        p = Patch(rng.integers(0, 256, levels).astype(np.uint8)[rng.integers(0, levels, (16, 16))])
        colors = distinct_colors(p)
        if len(colors) < 2:
            continue
        out = reduce_entropy(p, colors[rng.choice(len(colors), min(10, len(colors)), replace=False)], _Fixed(), [])
        violations += patch_entropy(out) > patch_entropy(p)

    samples = [gen_scene(64, 64, seed=i).image for i in range(4)]

    def run(epsilon):
        attack = ToyAttackOracle(ToyOracle(region=32), seed=0, proposals=10)
        cfg = AdaptiveConfig(epsilon=epsilon, check_freq=4, n_epochs=3, seed=0, patch_size=32)
        patch, _ = generate_low_entropy_patch(attack, cfg, samples)
        return patch_entropy(patch), attack.success_rate(patch, samples)

    free_h, free_rate = run(8.0)
    low_h, low_rate = run(5.0)
    ok = violations == 0 and low_h <= 5.0 and low_rate < free_rate
    verdict(
        9,
        "adaptive attack",
        ok,
        f"merge violations={violations}, budgeted entropy {low_h:.2f} <= 5, success {low_rate:.2f} < unconstrained {free_rate:.2f} (entropy {free_h:.2f})",
    )


def test_10_mi_masker(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        a = rng.integers(0, 256, (8, 8), dtype=np.uint8)
        b = rng.integers(0, 256, (8, 8), dtype=np.uint8) if rng.random() < 0.5 else (a // 3 + rng.integers(0, 60, (8, 8))).astype(np.uint8)
        ha, hb = quantized_entropy(a), quantized_entropy(b)
        worst = max(
            worst,
            abs(mutual_info(a, a) - ha),
            abs(mutual_info(a, b) - mutual_info(b, a)),
            max(0.0, mutual_info(a, b) - min(ha, hb)),
        )
    geometry = WindowGeometry(8, 4)
    scene = gen_smooth_scene(160, 140, seed=3, constant=120)
    image, gt = apply_patch(scene, gen_noise_patch(40, seed=3), (70, 40))
    heatmap = compute_heatmap(image, geometry)
    mask = expand_kernels(image, heatmap)
    peaks = kernels_to_mask(peak_extract(heatmap, 10.0))
    ys, xs = np.nonzero(gt)
    box = np.zeros_like(gt)
    box[max(0, ys.min() - 8) : ys.max() + 9, max(0, xs.min() - 8) : xs.max() + 9] = True
    contains = bool(mask[peaks].all())
    inside = not (mask & ~box).any()
    ok = worst <= 1e-12 and contains and inside
    verdict(10, "mutual-information masker", ok, f"identity/symmetry/bound worst {worst:.1e}, contains peaks={contains}, inside dilated box={inside}")
