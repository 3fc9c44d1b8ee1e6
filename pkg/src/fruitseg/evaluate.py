"""Confusion-matrix metrics, ground-class remap and model evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from fruitseg.checkpoint import load_checkpoint
from fruitseg.datasets import DatasetManifest, load_semantic, normalize_image, read_image
from fruitseg.errors import ConfigError, ShapeError, UndefinedMetricError
from fruitseg.model import INPUT_STRIDE, FruitSegNet

GROUND_CLASS = 2
BACKGROUND = 0


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
        k = self.num_classes
        for name, m in (("prediction", pred), ("ground truth", gt)):
            if m.size and (m.min() < 0 or m.max() >= k):
                raise ShapeError(f"{name} contains class ids outside [0, {k})")
        idx = k * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def remap_ground_to_background(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    return np.where(mask == GROUND_CLASS, BACKGROUND, mask).astype(mask.dtype)


def per_class_iou(cm: ConfusionMatrix) -> Dict[int, float]:
    """IoU per class; classes absent from both prediction and truth are left out."""
    if cm.total == 0:
        raise UndefinedMetricError("metrics are undefined for an empty confusion matrix")
    c = cm.counts
    inter = np.diag(c)
    union = c.sum(0) + c.sum(1) - inter
    return {k: float(inter[k] / union[k]) for k in range(cm.num_classes) if union[k] > 0}


def miou(cm: ConfusionMatrix) -> float:
    ious = per_class_iou(cm)
    return float(np.mean(list(ious.values())))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("metrics are undefined for an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


@dataclass
class EvalReport:
    per_class_iou: Dict[str, float]
    miou: float
    pixel_accuracy: float
    n_images: int
    remap_applied: bool
    checkpoint_id: Optional[str] = None
    manifest: Optional[str] = None
    confusion: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path


def report_from_matrix(cm: ConfusionMatrix, class_names, **meta) -> EvalReport:
    ious = per_class_iou(cm)
    return EvalReport(
        per_class_iou={class_names[k]: v for k, v in ious.items()},
        miou=miou(cm),
        pixel_accuracy=pixel_accuracy(cm),
        confusion=cm.counts.tolist(),
        **meta,
    )


@torch.no_grad()
def predict_logits(model: FruitSegNet, images: torch.Tensor) -> torch.Tensor:
    """Eval-mode logits at the input resolution.

    Inputs are reflection-padded on the bottom/right to the next multiple of
    64 and the logits cropped back.
    """
    h, w = images.shape[-2:]
    if h < INPUT_STRIDE or w < INPUT_STRIDE:
        raise ShapeError(f"images must be at least {INPUT_STRIDE}x{INPUT_STRIDE}, got {h}x{w}")
    ph, pw = -h % INPUT_STRIDE, -w % INPUT_STRIDE
    x = F.pad(images, (0, pw, 0, ph), mode="reflect") if ph or pw else images
    was_training = model.training
    model.eval()
    try:
        logits = model(x).seg_logits
    finally:
        model.train(was_training)
    return logits[..., :h, :w]


def predict_masks(model: FruitSegNet, images: torch.Tensor) -> np.ndarray:
    return predict_logits(model, images).argmax(1).cpu().numpy().astype(np.uint8)


def model_predictor(model: FruitSegNet, normalization, batch_size: int = 4):
    """Callable mapping a list of RGB images to predicted class rasters."""

    def predict(images):
        out = []
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            shapes = {im.shape for im in chunk}
            groups = [chunk] if len(shapes) == 1 else [[im] for im in chunk]
            for group in groups:
                x = torch.from_numpy(np.stack([normalize_image(im, normalization) for im in group]))
                out.extend(predict_masks(model, x))
        return out

    return predict


def evaluate_predictions(pairs: Iterable, num_classes: int, remap: bool) -> ConfusionMatrix:
    """Confusion matrix over ``(pred, gt)`` pairs, remapping both when requested."""
    cm = ConfusionMatrix(num_classes)
    for pred, gt in pairs:
        if remap:
            pred, gt = remap_ground_to_background(pred), remap_ground_to_background(gt)
        cm.accumulate(pred, gt)
    return cm


def evaluate_model(
    model: Optional[FruitSegNet],
    manifest: DatasetManifest,
    remap: bool = False,
    *,
    normalization=None,
    predictor: Optional[Callable] = None,
    checkpoint_id: Optional[str] = None,
    batch_size: int = 4,
) -> EvalReport:
    """Evaluate on every sample of ``manifest`` at native resolution.

    ``predictor`` replaces model inference; it receives ``(images, samples)``
    and returns one class raster per image.
    """
    if len(manifest) == 0:
        raise ConfigError(f"manifest {manifest.name!r} has no samples to evaluate")
    num_classes = manifest.class_map.num_classes
    if model is not None and model.cfg.num_classes != num_classes:
        raise ConfigError(
            f"model predicts {model.cfg.num_classes} classes but manifest declares {num_classes}"
        )
    norm = normalization or manifest.normalization
    cm = ConfusionMatrix(num_classes)
    samples = list(manifest.samples)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = [read_image(manifest.path(s.image)) for s in chunk]
        gts = [load_semantic(manifest, s) for s in chunk]
        if predictor is not None:
            preds = predictor(images, chunk)
        else:
            preds = model_predictor(model, norm, batch_size)(images)
        cm += evaluate_predictions(zip(preds, gts), num_classes, remap)
    names = dict(manifest.class_map.entries)
    return report_from_matrix(
        cm, names, n_images=len(samples), remap_applied=remap,
        checkpoint_id=checkpoint_id, manifest=manifest.name,
    )


def evaluate_checkpoint(checkpoint, manifest: DatasetManifest, remap: bool = False, out_path=None,
                        predictor: Optional[Callable] = None) -> EvalReport:
    """Evaluate a checkpoint directory; images are normalized with the manifest's statistics."""
    model, _ = load_checkpoint(checkpoint)
    report = evaluate_model(
        model, manifest, remap, predictor=predictor,
        checkpoint_id=str(Path(checkpoint).resolve()),
    )
    if out_path is not None:
        report.write(out_path)
    return report
