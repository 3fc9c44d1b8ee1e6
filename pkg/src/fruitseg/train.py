"""Losses, poly schedule, transfer regimes and the training loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from fruitseg.augment import random_hflip
from fruitseg.checkpoint import load_state, read_checkpoint_manifest, save_checkpoint
from fruitseg.datasets import DatasetManifest, load_instance, load_semantic, read_image
from fruitseg.errors import ConfigError, DataError, ShapeError
from fruitseg.evaluate import evaluate_model
from fruitseg.model import ENCODER_PREFIX, FruitSegNet, ForwardOutput
from fruitseg.targets import make_boundary_mask

log = logging.getLogger(__name__)

REGIMES = ("scratch", "generic_encoder", "specialized_full")
# (base_lr, epochs) used for fine-tuning in each regime
REGIME_PRESETS = {
    "scratch": (7.5e-3, 100),
    "generic_encoder": (1e-3, 50),
    "specialized_full": (1e-4, 50),
}


@dataclass(frozen=True)
class TrainRegime:
    name: str
    base_lr: float
    epochs: int
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    boundary_loss_weight: float = 1.0
    selection: str = "best_eval_miou"
    selection_split: str = "val"
    # square side training images are resized to; None keeps native size
    input_size: Optional[int] = None

    def __post_init__(self):
        if self.name not in REGIMES:
            raise ConfigError(f"unknown regime {self.name!r}; expected one of {REGIMES}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.boundary_loss_weight < 0:
            raise ConfigError("boundary_loss_weight must be >= 0")
        if self.selection != "best_eval_miou":
            raise ConfigError(f"unsupported selection rule {self.selection!r}")
        if self.selection_split not in ("val", "test"):
            raise ConfigError(f"selection_split must be 'val' or 'test', got {self.selection_split!r}")
        if self.input_size is not None and (self.input_size < 64 or self.input_size % 64):
            raise ConfigError(f"input_size must be a positive multiple of 64, got {self.input_size}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainRegime":
        if name not in REGIME_PRESETS:
            raise ConfigError(f"unknown regime {name!r}; expected one of {REGIMES}")
        base_lr, epochs = REGIME_PRESETS[name]
        return cls(**{"name": name, "base_lr": base_lr, "epochs": epochs, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    ce_loss: torch.Tensor
    boundary_loss: torch.Tensor
    total: torch.Tensor


def poly_lr(base_lr: float, step: int, max_steps: int, power: float = 0.9) -> float:
    """``base_lr * (1 - step / max_steps) ** power``."""
    if max_steps <= 0:
        raise ConfigError(f"max_steps must be > 0, got {max_steps}")
    if not 0 <= step <= max_steps:
        raise ConfigError(f"step {step} outside [0, {max_steps}]")
    return base_lr * (1.0 - step / max_steps) ** power


def combined_loss(
    output: ForwardOutput,
    semantic_target: torch.Tensor,
    boundary_target: Optional[torch.Tensor] = None,
    boundary_weight: float = 1.0,
) -> LossBreakdown:
    """Pixel-mean cross-entropy plus weighted pixel-mean boundary BCE."""
    seg = output.seg_logits
    if semantic_target.shape != (seg.shape[0],) + tuple(seg.shape[2:]):
        raise ShapeError(f"semantic target {tuple(semantic_target.shape)} does not match logits {tuple(seg.shape)}")
    if (boundary_target is None) != (output.boundary_logits is None):
        raise ConfigError("boundary_target must be given exactly when boundary logits are present")
    ce = F.cross_entropy(seg, semantic_target.long())
    if output.boundary_logits is None:
        bl = seg.new_zeros(())
    else:
        logits = output.boundary_logits[:, 0]
        if boundary_target.shape != logits.shape:
            raise ShapeError(
                f"boundary target {tuple(boundary_target.shape)} does not match logits {tuple(logits.shape)}"
            )
        bl = F.binary_cross_entropy_with_logits(logits, boundary_target.float())
    total = ce + boundary_weight * bl
    return LossBreakdown(ce_loss=ce, boundary_loss=bl, total=total)


# ---------------------------------------------------------------------------
# initialisation from pre-trained weights

@dataclass
class LoadReport:
    regime: str
    source: Optional[str]
    loaded: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    ignored: List[str] = field(default_factory=list)

    @property
    def fraction_loaded(self) -> float:
        n = len(self.loaded) + len(self.skipped)
        return len(self.loaded) / n if n else 0.0


def _encoder_key(key: str) -> str:
    # torchvision / timm resnet18 files name the trunk without our prefix
    return key if key.startswith(ENCODER_PREFIX) else ENCODER_PREFIX + key


def init_from_regime(model: FruitSegNet, regime: TrainRegime, source=None):
    """Load the weights a regime prescribes into ``model``; returns ``(model, LoadReport)``.

    ``scratch`` keeps the seeded random init; ``generic_encoder`` loads only
    encoder weights; ``specialized_full`` loads every parameter whose path and
    shape match a full checkpoint (class-count dependent layers keep their
    fresh init when the counts differ).
    """
    report = LoadReport(regime=regime.name, source=None if source is None else str(source))
    own = model.state_dict()
    if regime.name == "scratch":
        if source is not None:
            warnings.warn(f"scratch regime ignores weight source {source}")
        report.skipped = list(own)
        return model, report
    if source is None:
        raise ConfigError(f"regime {regime.name!r} requires a weight source")
    source = Path(source)
    if not source.exists():
        raise DataError(f"weight source {source} does not exist")

    if regime.name == "specialized_full":
        if not source.is_dir():
            raise ConfigError("specialized_full needs a full checkpoint directory")
        read_checkpoint_manifest(source)
        raw = load_state(source)
        incoming, original = raw, {k: k for k in raw}
        allowed = own.keys()
    else:
        raw = load_state(source)
        original = {_encoder_key(k): k for k in raw}
        incoming = {_encoder_key(k): v for k, v in raw.items()}
        allowed = [k for k in own if k.startswith(ENCODER_PREFIX)]

    new_state = {}
    for key in allowed:
        tensor = incoming.get(key)
        if tensor is not None and tuple(tensor.shape) == tuple(own[key].shape):
            new_state[key] = tensor
            report.loaded.append(key)
        else:
            report.skipped.append(key)
    report.skipped += [k for k in own if k not in allowed]
    report.ignored = [original[k] for k in incoming if k not in new_state]
    if not new_state:
        raise DataError(f"no parameters in {source} match the model")
    model.load_state_dict(new_state, strict=False)
    log.info("%s: loaded %d/%d tensors from %s", regime.name, len(report.loaded), len(own), source)
    return model, report


# ---------------------------------------------------------------------------
# data

class TrainingSet:
    """Training samples held in memory with boundary targets built from instance masks."""

    def __init__(self, manifest: DatasetManifest, input_size: Optional[int] = None, with_boundary: bool = True):
        self.normalization = manifest.normalization
        self.images, self.semantic, self.boundary = [], [], []
        for s in manifest.samples:
            img = read_image(manifest.path(s.image))
            sem = load_semantic(manifest, s)
            inst = load_instance(manifest, s)
            if inst is None:
                # without instances, class regions stand in for instances
                inst = sem
            if input_size is not None:
                img = cv2.resize(img, (input_size, input_size), interpolation=cv2.INTER_LINEAR)
                sem = cv2.resize(sem, (input_size, input_size), interpolation=cv2.INTER_NEAREST)
                inst = cv2.resize(inst, (input_size, input_size), interpolation=cv2.INTER_NEAREST)
            self.images.append(img)
            self.semantic.append(sem)
            self.boundary.append(make_boundary_mask(inst) if with_boundary else None)

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, indices, rng: Optional[np.random.Generator] = None):
        """Stack samples into tensors, flipping each one at random when ``rng`` is given."""
        mean, std = (np.asarray(v, np.float32).reshape(1, 1, 3) for v in self.normalization)
        xs, ys, bs = [], [], []
        for i in indices:
            triple = (self.images[i], self.semantic[i], self.boundary[i])
            if rng is not None:
                triple, rng = random_hflip(*triple, rng)
            img, sem, bnd = triple
            xs.append(((img.astype(np.float32) / 255.0 - mean) / std).transpose(2, 0, 1))
            ys.append(sem.astype(np.int64))
            bs.append(bnd)
        x = torch.from_numpy(np.ascontiguousarray(np.stack(xs)))
        y = torch.from_numpy(np.stack(ys))
        b = None if bs[0] is None else torch.from_numpy(np.stack(bs).astype(np.float32))
        return x, y, b


# ---------------------------------------------------------------------------
# loop

def make_optimizer(model: FruitSegNet, regime: TrainRegime) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(), lr=regime.base_lr, momentum=regime.momentum, weight_decay=regime.weight_decay
    )


def train_step(model, optimizer, x, y, boundary, lr: float, boundary_weight: float) -> LossBreakdown:
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    out = model(x)
    if out.boundary_logits is None:
        boundary = None
    loss = combined_loss(out, y, boundary, boundary_weight)
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    return loss


@dataclass
class EpochLog:
    epoch: int
    lr: float
    ce_loss: float
    boundary_loss: float
    total_loss: float
    miou: float
    pa: float


@dataclass
class TrainReport:
    regime: dict
    epochs: List[EpochLog]
    best_epoch: int
    best_miou: float
    checkpoint: str
    total_steps: int
    lr_trace: List[float]

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("lr_trace")
        return d


def run_training(
    model: FruitSegNet,
    train_manifest: DatasetManifest,
    eval_manifest: DatasetManifest,
    regime: TrainRegime,
    out_dir,
    *,
    seed: int = 0,
    remap_ground: bool = False,
    flip: bool = True,
) -> TrainReport:
    """Train with SGD and a per-step poly schedule, keeping the best-mIoU checkpoint.

    Writes ``epochs.jsonl``, ``lr_trace.json``, ``train_report.json`` and the
    ``best/`` checkpoint under ``out_dir``.
    """
    n = len(train_manifest)
    if n == 0:
        raise ConfigError(
            "training manifest is empty; for zero-shot results evaluate the source checkpoint "
            "directly (`fruitseg eval`)"
        )
    steps_per_epoch = math.ceil(n / regime.batch_size)
    if n // steps_per_epoch < 2:
        raise ConfigError(
            f"{n} training samples with batch_size {regime.batch_size} yields single-sample batches; "
            "batch normalization needs at least two"
        )
    if eval_manifest.split != regime.selection_split:
        raise ConfigError(
            f"selection uses the {regime.selection_split!r} split but the eval manifest is {eval_manifest.split!r}"
        )
    if regime.selection_split == "test":
        warnings.warn("selecting the checkpoint on the test split reports optimistic test scores")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = TrainingSet(train_manifest, regime.input_size, with_boundary=model.three_branch)
    total_steps = regime.epochs * steps_per_epoch
    optimizer = make_optimizer(model, regime)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)

    epoch_log = out_dir / "epochs.jsonl"
    epoch_log.write_text("")
    best_dir = out_dir / "best"
    lr_trace: List[float] = []
    logs: List[EpochLog] = []
    best_miou, best_epoch = -math.inf, 0
    step = 0
    for epoch in range(1, regime.epochs + 1):
        sums = np.zeros(3)
        for idx in np.array_split(rng.permutation(n), steps_per_epoch):
            lr = poly_lr(regime.base_lr, step, total_steps, regime.poly_power)
            x, y, b = data.batch(idx, rng if flip else None)
            loss = train_step(model, optimizer, x, y, b, lr, regime.boundary_loss_weight)
            sums += [loss.ce_loss.item(), loss.boundary_loss.item(), loss.total.item()]
            lr_trace.append(lr)
            step += 1
        report = evaluate_model(model, eval_manifest, remap_ground)
        mean = sums / steps_per_epoch
        entry = EpochLog(epoch, lr, *(float(v) for v in mean), report.miou, report.pixel_accuracy)
        logs.append(entry)
        with epoch_log.open("a") as f:
            f.write(json.dumps(asdict(entry)) + "\n")
        log.info("epoch %d lr %.3g loss %.4f miou %.4f pa %.4f", epoch, lr, mean[2], report.miou,
                 report.pixel_accuracy)
        if report.miou > best_miou:
            best_miou, best_epoch = report.miou, epoch
            save_checkpoint(
                model, best_dir,
                class_map=train_manifest.class_map.to_json(),
                source_regime=regime.name,
                selection_metric=f"miou/{eval_manifest.split}",
                selection_value=report.miou,
                epoch=epoch,
                normalization=train_manifest.normalization,
            )
    (out_dir / "lr_trace.json").write_text(json.dumps(lr_trace))
    result = TrainReport(
        regime=regime.to_dict(), epochs=logs, best_epoch=best_epoch, best_miou=best_miou,
        checkpoint=str(best_dir), total_steps=total_steps, lr_trace=lr_trace,
    )
    (out_dir / "train_report.json").write_text(json.dumps(result.to_json(), indent=2))
    return result
