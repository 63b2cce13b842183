import json
import subprocess
import sys

import numpy as np
import pytest

from jedi_defense.cli import build_parser, load_run_config, main, UsageError
from jedi_defense.entropy import CleanEntropyStats, WindowGeometry, fit_clean_stats
from jedi_defense.imagecore import apply_patch, gen_noise_patch, load_image, load_mask, save_image

from tests import oracles


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--count", "6", "--width", "96", "--height", "96", "--patch-out", str(root / "patch.png"), "--patch-size", "40"]) == 0
    assert main(["stats", "--images", str(data), "--out", str(root / "stats.json")]) == 0
    assert main(["train-ae", "--count", "60", "--epochs", "5", "--grid", "16", "--out", str(root / "model.json")]) == 0
    scene = load_image(data / "scene_0000.png")
    adv, gt = apply_patch(scene, gen_noise_patch(40, seed=0), (30, 20))
    save_image(adv, root / "adv.png")
    return root


def test_help_for_every_subcommand(capsys):
    for cmd in ("synth", "stats", "heatmap", "detect", "defend", "train-ae", "eval", "adaptive-patch"):
        assert main([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_stats_match_library(workspace):
    stats = CleanEntropyStats.load(workspace / "stats.json")
    images = [load_image(p) for p in sorted((workspace / "data").glob("*.png"))]
    direct = fit_clean_stats(images, WindowGeometry(8, 4))
    assert stats == direct


def test_stats_twice_identical(workspace, tmp_path):
    out = tmp_path / "again.json"
    assert main(["stats", "--images", str(workspace / "data"), "--out", str(out)]) == 0
    assert out.read_bytes() == (workspace / "stats.json").read_bytes()


def test_stats_of_constant_images(tmp_path):
    for i in range(2):
        save_image(np.full((64, 64), 40 + i, np.uint8), tmp_path / f"c{i}.png")
    assert main(["stats", "--images", str(tmp_path), "--out", str(tmp_path / "s.json")]) == 0
    s = CleanEntropyStats.load(tmp_path / "s.json")
    assert s.mu_clean == 0.0 and s.sigma_clean == 0.0


def test_heatmap_writes_png_and_json(workspace, tmp_path):
    assert main(["heatmap", "--in", str(workspace / "adv.png"), "--out", str(tmp_path / "h.png"), "--json", str(tmp_path / "h.json")]) == 0
    assert load_image(tmp_path / "h.png").shape == (23, 23)
    assert len(json.loads((tmp_path / "h.json").read_text())["grid"]) == 23


def test_defend_is_deterministic(workspace, tmp_path):
    args = ["defend", "--in", str(workspace / "adv.png"), "--stats", str(workspace / "stats.json"), "--model", str(workspace / "model.json"), "--w-tolerance", "6"]
    for tag in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / f"{tag}.png"), "--mask-out", str(tmp_path / f"{tag}_m.png"), "--summary", str(tmp_path / f"{tag}.json")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert (tmp_path / "a_m.png").read_bytes() == (tmp_path / "b_m.png").read_bytes()
    summary = json.loads((tmp_path / "a.json").read_text())
    assert {"thr", "w_image", "kernel_count", "mask_area", "timings"} <= set(summary)


def test_defend_flat_image_unchanged(workspace, tmp_path):
    flat = np.full((96, 96), 130, np.uint8)
    save_image(flat, tmp_path / "flat.png")
    assert main(["defend", "--in", str(tmp_path / "flat.png"), "--stats", str(workspace / "stats.json"), "--model", str(workspace / "model.json"), "--out", str(tmp_path / "o.png"), "--mask-out", str(tmp_path / "m.png")]) == 0
    assert np.array_equal(load_image(tmp_path / "o.png"), flat)
    assert not load_mask(tmp_path / "m.png").any()


def test_detect_directory_with_mi_masker(workspace, tmp_path):
    out = tmp_path / "masks"
    assert main(["detect", "--in", str(workspace / "data"), "--masker", "mi", "--mask-out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == [f"scene_{i:04d}_mask.png" for i in range(6)]


def test_eval_identity_report(workspace, tmp_path, capsys):
    report = tmp_path / "r.json"
    code = main(["eval", "--data", str(workspace / "data"), "--patch", str(workspace / "patch.png"), "--defense", "identity", "--region", "40", "--out", str(report)])
    assert code == 0
    data = json.loads(report.read_text())
    assert data["schema"] == "jedi-report/1"
    assert data["robust_accuracy"] == data["adversarial_accuracy"]
    assert oracles.tally(data["records"]) == {k: data[k] for k in oracles.tally(data["records"])}
    assert "patch_success_rate" in capsys.readouterr().out


def test_eval_with_defense_and_subprocess_oracle(workspace, tmp_path):
    report = tmp_path / "r.json"
    oracle_cmd = f"{sys.executable} -m jedi_defense.oracle_server --region 40"
    code = main(["eval", "--data", str(workspace / "data"), "--patch", str(workspace / "patch.png"), "--masker", "mi", "--oracle", oracle_cmd, "--out", str(report)])
    assert code == 0
    data = json.loads(report.read_text())
    assert len(data["records"]) == 6


def test_eval_empty_dataset_is_usage_error(tmp_path, workspace):
    (tmp_path / "labels.json").write_text("{}")
    assert main(["eval", "--data", str(tmp_path), "--patch", str(workspace / "patch.png"), "--defense", "identity", "--out", str(tmp_path / "r.json")]) == 2


def test_adaptive_patch(tmp_path):
    out, trace = tmp_path / "p.png", tmp_path / "t.json"
    code = main(["adaptive-patch", "--epsilon", "5", "--check-freq", "2", "--epochs", "1", "--samples", "2", "--proposals", "3", "--patch-size", "24", "--out", str(out), "--trace", str(trace)])
    assert code == 0
    from jedi_defense.adaptive import patch_entropy
    from jedi_defense.imagecore import Patch

    assert patch_entropy(Patch(load_image(out))) <= 5.0
    assert len(json.loads(trace.read_text())) >= 2


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"w_tolerance": 3.0, "masker": "mi", "window": 16}))
    c = load_run_config(str(cfg), {"w_tolerance": 5.0, "masker": None})
    assert c.w_tolerance == 5.0 and c.masker == "mi" and c.window == 16 and c.stride is None
    assert load_run_config(None, {}).w_tolerance == 1.0


def test_unknown_config_key_rejected(tmp_path, workspace, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"w_tolerence": 3.0}))
    with pytest.raises(UsageError):
        load_run_config(str(cfg), {})
    code = main(["heatmap", "--config", str(cfg), "--in", str(workspace / "adv.png"), "--out", str(tmp_path / "h.png"), "--error-json"])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and "w_tolerence" in err["message"]


def test_exit_codes(tmp_path, capsys, workspace):
    assert main(["stats"]) == 2
    assert main(["heatmap", "--in", str(tmp_path / "missing.png"), "--out", str(tmp_path / "x.png")]) == 3
    (tmp_path / "broken.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    assert main(["heatmap", "--in", str(tmp_path / "broken.png"), "--out", str(tmp_path / "x.png"), "--error-json"]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 3
    code = main(["eval", "--data", str(workspace / "data"), "--patch", str(workspace / "patch.png"), "--defense", "identity", "--oracle", f"{sys.executable} -c pass", "--out", str(tmp_path / "r.json"), "--error-json"])
    assert code == 4
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["sample_id"] is not None


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "jedi_defense.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()


def test_parser_builds():
    assert build_parser().prog == "jedi-defense"
