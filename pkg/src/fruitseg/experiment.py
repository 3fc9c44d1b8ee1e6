"""Desk-scale transfer experiment on synthetic orchards.

A "citrus-like" source corpus with both fruit classes labeled is used for
pre-training; an "apple-like" target corpus with only fruit on the tree
labeled is used for few-shot fine-tuning and evaluation. The experiment
reports zero-shot and k-shot mIoU for the specialized and scratch regimes and
for both decoder variants.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict

from fruitseg.augment import AugmentConfig
from fruitseg.checkpoint import load_checkpoint
from fruitseg.datasets import DatasetManifest, few_shot_subset, read_image, read_mask, restrict_labels
from fruitseg.evaluate import evaluate_checkpoint, model_predictor
from fruitseg.model import ArchitectureConfig, build_model
from fruitseg.prepare import prepare_dataset
from fruitseg.synthetic import SyntheticOrchardConfig, generate_synthetic_orchard
from fruitseg.train import TrainRegime, init_from_regime, run_training

log = logging.getLogger(__name__)

# reduced-width network used at desk scale
DESK_ARCH = dict(
    branch_width=64,
    head_width=64,
    ppm_branch_width=32,
    encoder_stage_channels=(16, 32, 64, 128),
    context_planes=64,
)


@dataclass
class ExperimentConfig:
    seed: int = 0
    image_size: int = 256
    n_source_train: int = 180
    n_source_val: int = 20
    n_target_train: int = 30
    n_target_test: int = 20
    shots: int = 2
    pretrain_epochs: int = 30
    finetune_epochs: int = 50
    scratch_epochs: int = 100
    crop_size: int = 128
    arch: dict = field(default_factory=lambda: dict(DESK_ARCH))
    variants: tuple = ("three_branch", "two_branch")


@dataclass
class ExperimentResult:
    seed: int
    zero_shot: Dict[str, float]
    specialized_kshot: Dict[str, float]
    scratch_kshot: float
    ground_pixels_after_finetune: int
    ground_images_checked: int
    seconds: float

    def to_json(self) -> dict:
        return asdict(self)


def make_corpora(cfg: ExperimentConfig, root: Path):
    base = cfg.seed * 1000
    src = dict(image_size=cfg.image_size, palette="citrus_like", name="synthetic-citrus",
               horizon_fraction=0.6, fruit_radius_range=(4, 10), tree_fraction=0.7)
    tgt = dict(image_size=cfg.image_size, palette="apple_like", name="synthetic-apple",
               horizon_fraction=0.55, fruit_radius_range=(5, 11), tree_fraction=0.75)
    source_train = generate_synthetic_orchard(
        SyntheticOrchardConfig(n_images=cfg.n_source_train, seed=base + 1, split="train", **src),
        root / "source" / "train")
    source_val = generate_synthetic_orchard(
        SyntheticOrchardConfig(n_images=cfg.n_source_val, seed=base + 2, split="val", **src),
        root / "source" / "val")
    target_train = generate_synthetic_orchard(
        SyntheticOrchardConfig(n_images=cfg.n_target_train, seed=base + 3, split="train", **tgt),
        root / "target" / "train")
    target_test = generate_synthetic_orchard(
        SyntheticOrchardConfig(n_images=cfg.n_target_test, seed=base + 4, split="test", **tgt),
        root / "target" / "test")
    # the target corpus carries no fruit-on-ground labels
    target_train = restrict_labels(target_train, [1])
    target_test_restricted = restrict_labels(target_test, [1])
    return source_train, source_val, target_train, target_test_restricted, target_test


def count_ground_predictions(checkpoint, raw_test: DatasetManifest, normalization) -> tuple:
    """Predicted class-2 pixels over test images whose full labels contain ground fruit."""
    model, _ = load_checkpoint(checkpoint)
    predict = model_predictor(model, normalization)
    total, images = 0, 0
    for s in raw_test.samples:
        if not (read_mask(raw_test.path(s.semantic_mask)) == 2).any():
            continue
        pred = predict([read_image(raw_test.path(s.image))])[0]
        total += int((pred == 2).sum())
        images += 1
    return total, images


def run_transfer_experiment(cfg: ExperimentConfig, workdir) -> ExperimentResult:
    start = time.time()
    root = Path(workdir) / f"seed{cfg.seed}"
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
    source_train, source_val, target_train, target_test, raw_test = make_corpora(cfg, root)

    pretrained = {}
    for variant in cfg.variants:
        arch = ArchitectureConfig(variant=variant, **cfg.arch)
        model = build_model(arch, seed=cfg.seed)
        regime = TrainRegime.preset("scratch", epochs=cfg.pretrain_epochs, selection_split="val")
        rep = run_training(model, source_train, source_val, regime, root / f"pretrain_{variant}",
                           seed=cfg.seed)
        pretrained[variant] = rep.checkpoint
        log.info("pretrained %s: best val miou %.4f", variant, rep.best_miou)

    zero_shot = {
        v: evaluate_checkpoint(pretrained[v], target_test, remap=True).miou for v in cfg.variants
    }

    shots = few_shot_subset(target_train, cfg.shots, seed=cfg.seed)
    crops = prepare_dataset(
        shots, root / f"target_{cfg.shots}shot", expand=True,
        augment=AugmentConfig(crop_size=cfg.crop_size), seed=cfg.seed,
    )
    # prepared masks are raw; keep the target's label restriction
    crops = restrict_labels(crops, target_train.class_map.labeled_classes)

    specialized = {}
    spec_ckpt = None
    for variant in cfg.variants:
        arch = ArchitectureConfig(variant=variant, **cfg.arch)
        regime = TrainRegime.preset("specialized_full", epochs=cfg.finetune_epochs, selection_split="test")
        model, _ = init_from_regime(build_model(arch, seed=cfg.seed), regime, pretrained[variant])
        rep = run_training(model, crops, target_test, regime, root / f"specialized_{variant}",
                           seed=cfg.seed, remap_ground=True)
        specialized[variant] = rep.best_miou
        if variant == "three_branch":
            spec_ckpt = rep.checkpoint

    arch = ArchitectureConfig(variant="three_branch", **cfg.arch)
    regime = TrainRegime.preset("scratch", epochs=cfg.scratch_epochs, selection_split="test")
    rep = run_training(build_model(arch, seed=cfg.seed), crops, target_test, regime,
                       root / "scratch_three_branch", seed=cfg.seed, remap_ground=True)
    scratch = rep.best_miou

    ground_pixels, ground_images = 0, 0
    if spec_ckpt is not None:
        ground_pixels, ground_images = count_ground_predictions(spec_ckpt, raw_test, target_test.normalization)

    result = ExperimentResult(
        seed=cfg.seed, zero_shot=zero_shot, specialized_kshot=specialized, scratch_kshot=scratch,
        ground_pixels_after_finetune=ground_pixels, ground_images_checked=ground_images,
        seconds=time.time() - start,
    )
    (root / "result.json").write_text(json.dumps(result.to_json(), indent=2))
    return result
