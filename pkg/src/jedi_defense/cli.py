"""Command-line front end.

Exit codes: 0 ok, 2 usage, 3 data error, 4 oracle error. With
``--error-json`` failures are also reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from jedi_defense import __version__
from jedi_defense.adaptive import AdaptiveConfig, ToyAttackOracle, generate_low_entropy_patch, patch_entropy
from jedi_defense.entropy import CleanEntropyStats, WindowGeometry, auto_geometry, compute_heatmap, fit_clean_stats
from jedi_defense.errors import JediError, OracleError, StageError
from jedi_defense.imagecore import (
    Patch,
    gen_noise_patch,
    gen_scene,
    load_image,
    save_image,
    save_mask,
)
from jedi_defense.inpaint import InpaintConfig
from jedi_defense.kernels import kernel_map_image
from jedi_defense.mask_ae import SparseAEModel, generate_training_masks, train_sae
from jedi_defense.mask_mi import MIConfig
from jedi_defense.metrics import Sample, evaluate, identity_defense
from jedi_defense.oracle import ToyOracle, SubprocessOracle
from jedi_defense.pipeline import DefenseConfig, JediDefense

log = logging.getLogger("jedi_defense")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ORACLE = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
LABELS_FILE = "labels.json"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Settings shared by the subcommands; ``None`` geometry means automatic."""

    window: int | None = None
    stride: int | None = None
    w_tolerance: float = 1.0
    min_cells: int = 4
    masker: str = "ae"
    k_percent: float = 10.0
    mi_radius: int = 2
    mi_ratio_threshold: float = 0.5
    mi_bins: int = 32
    mi_min_entropy: float = 0.0
    inpaint_radius: int = 5
    coherence_smoothing: float = 1.5
    oracle: str = "builtin"
    trip: float = 5.0
    region: int = 50
    seed: int = 0

    def geometry(self, width: int, height: int) -> WindowGeometry:
        if self.window is None:
            auto = auto_geometry(width, height)
            return auto if self.stride is None else WindowGeometry(auto.window, self.stride)
        return WindowGeometry(self.window, self.stride if self.stride is not None else self.window // 2)

    def defense_config(self, geometry: WindowGeometry | None) -> DefenseConfig:
        return DefenseConfig(
            w_tolerance=self.w_tolerance,
            min_cells=self.min_cells,
            masker=self.masker,
            geometry=geometry,
            inpaint=InpaintConfig(radius=self.inpaint_radius, coherence_smoothing=self.coherence_smoothing),
            mi=MIConfig(
                k_percent=self.k_percent,
                radius=self.mi_radius,
                mi_ratio_threshold=self.mi_ratio_threshold,
                bins=self.mi_bins,
                min_entropy=self.mi_min_entropy,
            ),
        )


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def _parse_geometry_value(value):
    if value is None or value == "auto":
        return None
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise UsageError(f"geometry values must be integers or 'auto', got {value!r}")
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"geometry values must be integers or 'auto', got {value!r}") from None


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the JSON file, then non-``None`` flags."""
    values: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(data) - CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.update(data)
    values.update({k: v for k, v in overrides.items() if k in CONFIG_KEYS and v is not None})
    for key in ("window", "stride"):
        if key in values:
            values[key] = _parse_geometry_value(values[key])
    try:
        config = RunConfig(**values)
        config.defense_config(None)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return config


def _image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _inputs(path) -> list[Path]:
    p = Path(path)
    return _image_files(p) if p.is_dir() else [p]


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_json(obj, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _make_oracle(config: RunConfig):
    if config.oracle == "builtin":
        return ToyOracle(trip=config.trip, region=config.region)
    return SubprocessOracle(config.oracle)


def _build_defense(config: RunConfig, args, image_shape) -> JediDefense:
    stats = CleanEntropyStats.load(args.stats) if getattr(args, "stats", None) else None
    model = SparseAEModel.load(args.model) if getattr(args, "model", None) else None
    if config.window is None and config.stride is None and stats is not None:
        geometry = stats.geometry
    else:
        geometry = config.geometry(image_shape[1], image_shape[0])
    if config.masker == "ae" and (stats is None or model is None):
        raise UsageError("--masker ae needs --stats and --model")
    return JediDefense(stats, model, config.defense_config(geometry))


# commands


def cmd_synth(args, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = {}
    for i in range(args.count):
        scene = gen_scene(args.width, args.height, seed=config.seed + i, channels=args.channels)
        name = f"scene_{i:04d}.png"
        save_image(scene.image, out / name)
        labels[name] = scene.label
    _write_json(labels, out / LABELS_FILE)
    if args.patch_out:
        save_image(gen_noise_patch(args.patch_size, seed=config.seed, channels=args.channels).pixels, args.patch_out)
    _emit({"count": args.count, "dir": str(out)})
    return EXIT_OK


def cmd_stats(args, config: RunConfig) -> int:
    files = _image_files(args.images)
    if not files:
        raise FileNotFoundError(f"no images in {args.images}")
    images = [load_image(p) for p in files]
    h, w = images[0].shape[:2]
    stats = fit_clean_stats(images, config.geometry(w, h))
    stats.save(args.out)
    _emit({"mu": stats.mu_clean, "sigma": stats.sigma_clean, "n_windows": stats.n_windows})
    return EXIT_OK


def cmd_heatmap(args, config: RunConfig) -> int:
    image = load_image(args.input)
    geometry = config.geometry(image.shape[1], image.shape[0])
    heatmap = compute_heatmap(image, geometry)
    save_image(heatmap.to_image(), args.out)
    if args.json:
        _write_json(heatmap.to_json(), args.json)
    _emit({"grid": list(heatmap.grid.shape), "max": float(heatmap.grid.max()), "window": geometry.window, "stride": geometry.stride})
    return EXIT_OK


def _output_path(base, src: Path, many: bool, suffix: str) -> Path:
    if not many:
        return Path(base)
    Path(base).mkdir(parents=True, exist_ok=True)
    return Path(base) / f"{src.stem}{suffix}.png"


def cmd_detect(args, config: RunConfig) -> int:
    return _run_defense(args, config, repair=False)


def cmd_defend(args, config: RunConfig) -> int:
    return _run_defense(args, config, repair=True)


def _run_defense(args, config: RunConfig, repair: bool) -> int:
    files = _inputs(args.input)
    if not files:
        raise FileNotFoundError(f"no images in {args.input}")
    many = Path(args.input).is_dir()
    summaries = {}
    for src in files:
        image = load_image(src)
        result = _build_defense(config, args, image.shape).run(image)
        if repair:
            save_image(result.image, _output_path(args.out, src, many, ""))
        if args.mask_out:
            save_mask(result.mask, _output_path(args.mask_out, src, many, "_mask"))
        if getattr(args, "kernels_out", None):
            save_image(kernel_map_image(result.kernels), _output_path(args.kernels_out, src, many, "_kernels"))
        summaries[src.name] = result.summary
    report = summaries if many else summaries[files[0].name]
    if args.summary:
        _write_json(report, args.summary)
    _emit(report)
    return EXIT_OK


def cmd_train_ae(args, config: RunConfig) -> int:
    data = generate_training_masks(args.count, grid=args.grid, seed=config.seed)

    def progress(epoch, loss, lr):
        if args.verbose and epoch % 50 == 0:
            log.info("epoch %d loss %.4f lr %g", epoch, loss, lr)

    model = train_sae(data, epochs=args.epochs, learning_rate=args.learning_rate, seed=config.seed, progress=progress)
    model.save(args.out)
    _emit({"epochs": model.epochs_trained, "final_loss": model.history[-1] if model.history else None, "out": args.out})
    return EXIT_OK


def load_dataset(directory) -> list[Sample]:
    d = Path(directory)
    labels_path = d / LABELS_FILE
    if not labels_path.exists():
        raise FileNotFoundError(f"{labels_path} not found")
    with open(labels_path) as fh:
        labels = json.load(fh)
    return [Sample(id=name, image=load_image(d / name), label=str(labels[name])) for name in sorted(labels)]


def cmd_eval(args, config: RunConfig) -> int:
    dataset = load_dataset(args.data)
    if not dataset:
        raise UsageError("dataset is empty")
    patch = Patch(load_image(args.patch), id=Path(args.patch).stem)
    if args.defense == "identity":
        defense = identity_defense
    else:
        defense = _build_defense(config, args, dataset[0].image.shape)
    oracle = _make_oracle(config)
    try:
        report = evaluate(dataset, patch, oracle, defense, seed=config.seed)
    finally:
        if hasattr(oracle, "close"):
            oracle.close()
    report.save(args.out)
    print(report.table())
    return EXIT_OK


def cmd_adaptive_patch(args, config: RunConfig) -> int:
    acfg = AdaptiveConfig(
        epsilon=args.epsilon,
        check_freq=args.check_freq,
        n_colors=args.n_colors,
        n_epochs=args.epochs,
        seed=config.seed,
        patch_size=args.patch_size,
    )
    if args.data:
        samples = [s.image for s in load_dataset(args.data)]
    else:
        samples = [gen_scene(args.sample_size, args.sample_size, seed=config.seed + i).image for i in range(args.samples)]
    if not samples:
        raise UsageError("no samples")
    model = ToyOracle(trip=config.trip, region=acfg.patch_size) if config.oracle == "builtin" else _make_oracle(config)
    try:
        attack = ToyAttackOracle(model, seed=config.seed, proposals=args.proposals)
        patch, trace = generate_low_entropy_patch(attack, acfg, samples)
        rate = attack.success_rate(patch, samples)
    finally:
        if hasattr(model, "close"):
            model.close()
    save_image(patch.pixels, args.out)
    if args.trace:
        _write_json([t.to_json() for t in trace], args.trace)
    _emit({"entropy": patch_entropy(patch), "success_rate": rate, "iterations": len(trace)})
    return EXIT_OK


# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of run settings; flags override it")
    p.add_argument("--seed", type=int, help="seed for every random choice")
    p.add_argument("--error-json", action="store_true", help="report failures as JSON on stderr")
    p.add_argument("-v", "--verbose", action="store_true")


def _geometry_flags(p) -> None:
    p.add_argument("--window", help="window size in pixels or 'auto'")
    p.add_argument("--stride", help="stride in pixels or 'auto'")


def _defense_flags(p) -> None:
    _geometry_flags(p)
    p.add_argument("--stats", help="clean statistics JSON")
    p.add_argument("--model", help="trained autoencoder JSON")
    p.add_argument("--masker", choices=["ae", "mi"])
    p.add_argument("--w-tolerance", dest="w_tolerance", type=float)
    p.add_argument("--min-cells", dest="min_cells", type=int)
    p.add_argument("--k-percent", dest="k_percent", type=float)
    p.add_argument("--inpaint-radius", dest="inpaint_radius", type=int)


def _oracle_flags(p) -> None:
    p.add_argument("--oracle", help="'builtin' or a command speaking the JSON-lines protocol")
    p.add_argument("--trip", type=float, help="entropy trip level of the builtin oracle")
    p.add_argument("--region", type=int, help="region size of the builtin oracle")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jedi-defense", description="Entropy-based adversarial patch detection and repair.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic scene dataset with labels.json")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--height", type=int, default=224)
    p.add_argument("--channels", type=int, choices=[1, 3], default=1)
    p.add_argument("--patch-out", dest="patch_out", help="also write a noise patch here")
    p.add_argument("--patch-size", dest="patch_size", type=int, default=32,
                   help="patch side; the builtin oracle region follows it")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="fit clean-image entropy statistics")
    _common(p)
    _geometry_flags(p)
    p.add_argument("--images", required=True, help="directory of clean images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("heatmap", help="write an entropy heatmap PNG")
    _common(p)
    _geometry_flags(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", help="also write the heatmap values as JSON")
    p.set_defaults(func=cmd_heatmap)

    for name, func, help_text in (
        ("detect", cmd_detect, "predict a patch mask"),
        ("defend", cmd_defend, "predict a patch mask and inpaint it"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        _defense_flags(p)
        p.add_argument("--in", dest="input", required=True, help="image file or directory")
        if name == "defend":
            p.add_argument("--out", required=True, help="repaired image (or directory)")
        p.add_argument("--mask-out", dest="mask_out", required=(name == "detect"))
        p.add_argument("--kernels-out", dest="kernels_out")
        p.add_argument("--summary", help="write the run summary JSON here")
        p.set_defaults(func=func)

    p = sub.add_parser("train-ae", help="train the mask-completion autoencoder")
    _common(p)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("eval", help="evaluate a defense against a patch")
    _common(p)
    _defense_flags(p)
    _oracle_flags(p)
    p.add_argument("--data", required=True, help="directory with images and labels.json")
    p.add_argument("--patch", required=True)
    p.add_argument("--defense", choices=["jedi", "identity"], default="jedi")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adaptive-patch", help="generate an entropy-budgeted patch")
    _common(p)
    _oracle_flags(p)
    p.add_argument("--epsilon", type=float, default=5.0)
    p.add_argument("--check-freq", dest="check_freq", type=int, default=4)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--n-colors", dest="n_colors", type=int, default=10)
    p.add_argument("--proposals", type=int, default=10)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=32,
                   help="patch side; the builtin oracle region follows it")
    p.add_argument("--data", help="sample directory; default is synthetic scenes")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--sample-size", dest="sample_size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_adaptive_patch)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, OracleError):
        return EXIT_ORACLE
    return EXIT_DATA


def main(argv=None) -> int:
    error_json = "--error-json" in (sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        config = load_run_config(args.config, vars(args))
        return args.func(args, config)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, JediError, OSError, ValueError, KeyError) as exc:
        code = _exit_code(exc)
        message = str(exc)
        if error_json:
            err = {"error": type(exc).__name__, "message": message, "exit_code": code}
            if isinstance(exc, StageError):
                err["stage"] = exc.stage
            root = exc.cause if isinstance(exc, StageError) else exc
            if isinstance(root, OracleError):
                err["sample_id"] = root.sample_id
            print(json.dumps(err), file=sys.stderr)
        else:
            print(f"error: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
