"""Command-line entry point: ``fruitseg synth|prepare|train|eval|predict``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from fruitseg.augment import AugmentConfig
from fruitseg.checkpoint import load_checkpoint
from fruitseg.datasets import (
    DEFAULT_NORMALIZATION,
    few_shot_subset,
    load_manifest,
    read_image,
    restrict_labels,
    write_image,
    write_mask,
)
from fruitseg.errors import ConfigError, DataError, FruitSegError, ShapeError, UnsupportedVariantError
from fruitseg.evaluate import evaluate_checkpoint, model_predictor
from fruitseg.model import ArchitectureConfig, build_model
from fruitseg.prepare import prepare_dataset
from fruitseg.synthetic import SyntheticOrchardConfig, generate_synthetic_orchard
from fruitseg.targets import external_oracle_adapter, fallback_ellipse_oracle
from fruitseg.train import TrainRegime, init_from_regime, run_training

log = logging.getLogger("fruitseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

RGB = Tuple[int, int, int]


@dataclass(frozen=True)
class OverlayStyle:
    tree_color: RGB = (0, 255, 255)
    ground_color: RGB = (255, 0, 255)
    alpha: float = 0.5

    def __post_init__(self):
        for name in ("tree_color", "ground_color"):
            c = tuple(int(v) for v in getattr(self, name))
            if len(c) != 3 or any(v < 0 or v > 255 for v in c):
                raise ConfigError(f"{name} must be three values in [0, 255], got {getattr(self, name)}")
            object.__setattr__(self, name, c)
        if self.tree_color == self.ground_color:
            raise ConfigError("tree_color and ground_color must differ")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


OVERLAY_STYLES = {
    "cyan_magenta": OverlayStyle(),
    "red_blue": OverlayStyle(tree_color=(255, 0, 0), ground_color=(0, 0, 255)),
}


def overlay(image: np.ndarray, mask: np.ndarray, style: OverlayStyle = OverlayStyle()) -> np.ndarray:
    """Blend class colors into an RGB image where fruit is predicted; other pixels are untouched."""
    out = image.copy()
    a = style.alpha
    for cls, color in ((1, style.tree_color), (2, style.ground_color)):
        sel = mask == cls
        blended = (1.0 - a) * image[sel].astype(np.float64) + a * np.asarray(color, dtype=np.float64)
        out[sel] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# commands

def _echo(name: str, config: dict) -> None:
    log.info("%s config: %s", name, json.dumps(config, sort_keys=True, default=str))


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read synth config {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed synth config {args.config}: {e}") from e
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SyntheticOrchardConfig.from_dict(raw)
    _echo("synth", {"out_dir": args.out_dir, **cfg.to_dict()})
    manifest = generate_synthetic_orchard(cfg, args.out_dir)
    print(Path(args.out_dir) / "manifest.json")
    log.info("wrote %d images", len(manifest))
    return EXIT_OK


def _oracle(spec: Optional[str]):
    if spec is None:
        return None
    if spec == "ellipse":
        return fallback_ellipse_oracle
    if spec.startswith("dir:"):
        return external_oracle_adapter(spec[4:])
    raise ConfigError(f"--oracle must be 'ellipse' or 'dir:PATH', got {spec!r}")


def cmd_prepare(args) -> int:
    seed = args.seed if args.seed is not None else 0
    augment = AugmentConfig(
        scales=tuple(args.scales) if args.scales else AugmentConfig.scales,
        crops_per_scale=args.crops_per_scale,
        crop_size=args.crop_size,
    )
    _echo("prepare", {
        "manifest": args.manifest, "out_dir": args.out_dir, "oracle": args.oracle,
        "expand": args.expand, "seed": seed, "augment": asdict(augment),
    })
    manifest = load_manifest(args.manifest)
    derived = prepare_dataset(manifest, args.out_dir, oracle=_oracle(args.oracle), expand=args.expand,
                              augment=augment, seed=seed)
    print(Path(args.out_dir) / "manifest.json")
    log.info("prepared %d samples", len(derived))
    return EXIT_OK


def _resolve(base: Path, p: Optional[str]) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def resolve_run_config(path) -> dict:
    """Read a run config and fill in every default so the echo alone reproduces the run."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read run config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed run config {path}: {e}") from e
    known = {"regime", "arch", "data", "init_source", "seed", "out_dir", "overrides"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    for key in ("regime", "data", "out_dir"):
        if key not in raw:
            raise ConfigError(f"run config is missing {key!r}")
    data = dict(raw["data"])
    for key in ("train_manifest", "eval_manifest"):
        if key not in data:
            raise ConfigError(f"run config data is missing {key!r}")
    base = path.parent
    try:
        regime = TrainRegime.preset(raw["regime"], **raw.get("overrides", {}))
        augment = AugmentConfig(**data.get("augment", {}))
    except TypeError as e:
        raise ConfigError(f"bad regime override or augment field: {e}") from e
    resolved = {
        "regime": regime.to_dict(),
        "arch": dict(raw.get("arch", {})),
        "data": {
            "train_manifest": str(_resolve(base, data["train_manifest"])),
            "eval_manifest": str(_resolve(base, data["eval_manifest"])),
            "few_shot_k": data.get("few_shot_k"),
            "expand": bool(data.get("expand", False)),
            "augment": asdict(augment),
            "labeled_classes": data.get("labeled_classes"),
            "remap_ground": bool(data.get("remap_ground", False)),
        },
        "init_source": None if raw.get("init_source") is None else str(_resolve(base, raw["init_source"])),
        "seed": int(raw.get("seed", 0)),
        "out_dir": str(_resolve(base, raw["out_dir"])),
    }
    extra = set(data) - set(resolved["data"])
    if extra:
        raise ConfigError(f"unknown run config data keys: {sorted(extra)}")
    k = resolved["data"]["few_shot_k"]
    if k is not None and k < 1:
        raise ConfigError(
            f"few_shot_k={k} leaves nothing to train on; for zero-shot results run "
            "`fruitseg eval CHECKPOINT MANIFEST --remap-ground` on the source checkpoint"
        )
    return resolved


def cmd_train(args) -> int:
    cfg = resolve_run_config(args.run_config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _echo("train", cfg)
    out_dir = Path(cfg["out_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out_dir}: {e}") from e
    (out_dir / "run_config.resolved.json").write_text(json.dumps(cfg, indent=2))

    data = cfg["data"]
    regime = TrainRegime(**cfg["regime"])
    train = load_manifest(data["train_manifest"])
    evaluation = load_manifest(data["eval_manifest"])
    if data["few_shot_k"] is not None:
        train = few_shot_subset(train, data["few_shot_k"], seed=cfg["seed"])
    if data["expand"]:
        train = prepare_dataset(train, out_dir / "data", expand=True,
                                augment=AugmentConfig(**data["augment"]), seed=cfg["seed"])
    if data["labeled_classes"] is not None:
        train = restrict_labels(train, data["labeled_classes"])
        evaluation = restrict_labels(evaluation, data["labeled_classes"])

    arch = {"variant": "three_branch", "num_classes": train.class_map.num_classes, **cfg["arch"]}
    model = build_model(ArchitectureConfig.from_dict(arch), seed=cfg["seed"])
    model, load_report = init_from_regime(model, regime, cfg["init_source"])
    log.info("initialized %.1f%% of tensors from %s", 100 * load_report.fraction_loaded, load_report.source)
    report = run_training(model, train, evaluation, regime, out_dir, seed=cfg["seed"],
                          remap_ground=data["remap_ground"])
    print(out_dir / "train_report.json")
    log.info("best %s mIoU %.4f at epoch %d -> %s", regime.selection_split, report.best_miou,
             report.best_epoch, report.checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else Path(args.checkpoint) / "eval_report.json"
    _echo("eval", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                   "remap_ground": args.remap_ground, "out": str(out)})
    manifest = load_manifest(args.manifest)
    report = evaluate_checkpoint(args.checkpoint, manifest, remap=args.remap_ground, out_path=out)
    print(out)
    log.info("mIoU %.4f  PA %.4f over %d images", report.miou, report.pixel_accuracy, report.n_images)
    return EXIT_OK


def _style(args) -> OverlayStyle:
    style = OVERLAY_STYLES[args.style]
    if args.alpha is not None:
        style = OverlayStyle(style.tree_color, style.ground_color, args.alpha)
    return style


def cmd_predict(args) -> int:
    style = _style(args)
    paths = sorted(glob.glob(args.images))
    _echo("predict", {"checkpoint": args.checkpoint, "images": args.images, "n_matched": len(paths),
                      "out_dir": args.out_dir, "style": asdict(style)})
    if not paths:
        raise DataError(f"no images match {args.images!r}")
    model, manifest = load_checkpoint(args.checkpoint)
    norm = manifest.get("normalization")
    normalization = (tuple(norm["mean"]), tuple(norm["std"])) if norm else DEFAULT_NORMALIZATION
    predict = model_predictor(model, normalization, batch_size=1)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for p in paths:
        try:
            image = read_image(Path(p))
            mask = predict([image])[0]
        except (DataError, ShapeError) as e:
            log.warning("skipping %s: %s", p, e)
            continue
        stem = Path(p).stem
        write_mask(out_dir / f"{stem}_pred.png", mask)
        write_image(out_dir / f"{stem}_overlay.png", overlay(image, mask, style))
        written += 1
    if written == 0:
        raise DataError(f"none of the {len(paths)} matched images could be processed")
    print(out_dir)
    log.info("wrote predictions for %d/%d images", written, len(paths))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed overriding configs and defaults")
    common.add_argument("--log-level", default=argparse.SUPPRESS, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser = argparse.ArgumentParser(prog="fruitseg", description="Fruit segmentation with few-shot transfer.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic orchard corpus")
    p.add_argument("config", help="JSON file with SyntheticOrchardConfig fields")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="write masks, boundaries and expanded crops")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--oracle", help="'ellipse' or 'dir:PATH' to rebuild masks from boxes")
    p.add_argument("--expand", action="store_true", help="write multi-scale crops")
    p.add_argument("--crop-size", type=int, default=AugmentConfig.crop_size)
    p.add_argument("--crops-per-scale", type=int, default=AugmentConfig.crops_per_scale)
    p.add_argument("--scales", type=float, nargs="+")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train from a JSON run config")
    p.add_argument("run_config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--remap-ground", action="store_true", help="score fruit-on-ground as background")
    p.add_argument("--out", help="report path (default CHECKPOINT/eval_report.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="write predicted masks and overlays")
    p.add_argument("checkpoint")
    p.add_argument("images", help="glob pattern, quoted")
    p.add_argument("out_dir")
    p.add_argument("--style", choices=sorted(OVERLAY_STYLES), default="cyan_magenta")
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_predict)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, UnsupportedVariantError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, ShapeError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # parent-parser actions are shared, so defaults are filled in here rather than via set_defaults
    args.seed = getattr(args, "seed", None)
    args.log_level = getattr(args, "log_level", "INFO")
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("fruitseg").setLevel(args.log_level)
    try:
        return args.func(args)
    except FruitSegError as e:
        code = exit_code_for(e)
        print(f"fruitseg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return code
    except Exception as e:  # anything unexpected is a runtime failure
        log.debug("unhandled error", exc_info=True)
        print(f"fruitseg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
