"""Dataset manifests, raster IO, class scheme and subset helpers.

A manifest is a JSON file whose sample paths are relative to the manifest's
own directory::

    {"format_version": 1, "name": "...", "split": "train",
     "class_map": {"0": "background", "1": "fruit_on_tree", "2": "fruit_on_ground"},
     "labeled_classes": [0, 1, 2],
     "normalization": {"mean": [r, g, b], "std": [r, g, b]},
     "samples": [{"image": "...", "semantic_mask": "...",
                  "instance_mask": "...", "boxes": "..."}]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from fruitseg.errors import ConfigError, DataError
from fruitseg.targets import Box

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_CLASSES = ((0, "background"), (1, "fruit_on_tree"), (2, "fruit_on_ground"))
# ImageNet statistics; only a fallback when a manifest carries none
DEFAULT_NORMALIZATION = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


@dataclass(frozen=True)
class ClassMap:
    entries: Tuple[Tuple[int, str], ...] = DEFAULT_CLASSES
    labeled_classes: Tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries or entries[0] != (0, "background"):
            raise ConfigError("class map must start with (0, 'background')")
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate class ids in {entries}")
        labeled = tuple(sorted(set(int(c) for c in self.labeled_classes) | {0}))
        if not set(labeled) <= set(ids):
            raise ConfigError(f"labeled_classes {labeled} not all declared in {ids}")
        object.__setattr__(self, "labeled_classes", labeled)

    @property
    def ids(self) -> List[int]:
        return [i for i, _ in self.entries]

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    def name(self, class_id: int) -> str:
        return dict(self.entries)[class_id]

    def to_json(self) -> dict:
        return {str(i): n for i, n in self.entries}

    @classmethod
    def from_json(cls, d: dict, labeled=None) -> "ClassMap":
        entries = tuple(sorted((int(k), v) for k, v in d.items()))
        return cls(entries, tuple(labeled) if labeled is not None else tuple(i for i, _ in entries))


@dataclass(frozen=True)
class Sample:
    image: str
    semantic_mask: Optional[str] = None
    instance_mask: Optional[str] = None
    boxes: Optional[str] = None
    id: Optional[str] = None

    @property
    def image_id(self) -> str:
        return self.id if self.id is not None else Path(self.image).stem

    def to_json(self) -> dict:
        d = {"image": self.image}
        for key in ("semantic_mask", "instance_mask", "boxes", "id"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    samples: Tuple[Sample, ...] = ()
    class_map: ClassMap = field(default_factory=ClassMap)
    normalization: Tuple[Tuple[float, ...], Tuple[float, ...]] = DEFAULT_NORMALIZATION
    provenance: Optional[dict] = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "samples", tuple(self.samples))
        mean, std = self.normalization
        object.__setattr__(
            self, "normalization", (tuple(float(v) for v in mean), tuple(float(v) for v in std))
        )
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self) -> int:
        return len(self.samples)

    def path(self, rel: Optional[str]) -> Optional[Path]:
        return None if rel is None else self.root / rel

    @property
    def ids(self) -> List[str]:
        return [s.image_id for s in self.samples]

    def to_json(self) -> dict:
        d = {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "split": self.split,
            "class_map": self.class_map.to_json(),
            "labeled_classes": list(self.class_map.labeled_classes),
            "normalization": {"mean": list(self.normalization[0]), "std": list(self.normalization[1])},
            "samples": [s.to_json() for s in self.samples],
        }
        if self.provenance is not None:
            d["provenance"] = self.provenance
        return d


# ---------------------------------------------------------------------------
# raster IO

def read_image(path: Path) -> np.ndarray:
    """RGB uint8 image, HxWx3."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)


def write_image(path: Path, rgb: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(rgb), cv2.COLOR_RGB2BGR)):
        raise DataError(f"cannot write image {path}")


def read_mask(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot read mask {path}")
    if raw.ndim != 2:
        raise DataError(f"mask {path} must be single-channel, got shape {raw.shape}")
    return raw


def write_mask(path: Path, mask: np.ndarray, dtype=np.uint8) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > np.iinfo(dtype).max):
        raise DataError(f"mask values out of range for {np.dtype(dtype).name}: {path}")
    if not cv2.imwrite(str(path), mask.astype(dtype)):
        raise DataError(f"cannot write mask {path}")


def read_boxes(path: Path) -> List[Box]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read boxes {path}: {e}") from e
    try:
        return [Box.from_dict(d) for d in data]
    except (KeyError, TypeError, ConfigError) as e:
        raise DataError(f"invalid box in {path}: {e}") from e


def write_boxes(path: Path, boxes: Iterable[Box]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([b.to_dict() for b in boxes]))


def remap_unlabeled(mask: np.ndarray, labeled_classes: Sequence[int]) -> np.ndarray:
    keep = np.isin(mask, list(labeled_classes))
    return np.where(keep, mask, 0).astype(mask.dtype)


def load_semantic(manifest: DatasetManifest, sample: Sample) -> np.ndarray:
    """Semantic mask with classes outside ``labeled_classes`` folded into background."""
    if sample.semantic_mask is None:
        raise DataError(f"sample {sample.image_id} has no semantic mask")
    mask = read_mask(manifest.path(sample.semantic_mask))
    if set(manifest.class_map.labeled_classes) != set(manifest.class_map.ids):
        mask = remap_unlabeled(mask, manifest.class_map.labeled_classes)
    return mask


def load_instance(manifest: DatasetManifest, sample: Sample) -> Optional[np.ndarray]:
    if sample.instance_mask is None:
        return None
    return read_mask(manifest.path(sample.instance_mask))


def load_sample_boxes(manifest: DatasetManifest, sample: Sample) -> Optional[List[Box]]:
    if sample.boxes is None:
        return None
    return read_boxes(manifest.path(sample.boxes))


def normalize_image(rgb: np.ndarray, normalization) -> np.ndarray:
    """uint8 HxWx3 -> float32 3xHxW standardized with per-channel mean/std."""
    mean, std = (np.asarray(v, dtype=np.float32) for v in normalization)
    x = rgb.astype(np.float32) / 255.0
    return np.ascontiguousarray(((x - mean) / std).transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# manifests

def load_manifest(path, validate: bool = True) -> DatasetManifest:
    """Read and validate a manifest.

    With ``validate`` every referenced file must exist and every semantic
    mask may only contain ids declared in the class map.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest JSON {path}: {e}") from e
    try:
        if data.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported manifest format_version {data.get('format_version')!r}")
        class_map = ClassMap.from_json(data["class_map"], data.get("labeled_classes"))
        norm = data.get("normalization") or {}
        normalization = (
            tuple(norm.get("mean", DEFAULT_NORMALIZATION[0])),
            tuple(norm.get("std", DEFAULT_NORMALIZATION[1])),
        )
        samples = tuple(
            Sample(
                image=s["image"],
                semantic_mask=s.get("semantic_mask"),
                instance_mask=s.get("instance_mask"),
                boxes=s.get("boxes"),
                id=s.get("id"),
            )
            for s in data["samples"]
        )
        manifest = DatasetManifest(
            name=data["name"],
            split=data["split"],
            samples=samples,
            class_map=class_map,
            normalization=normalization,
            provenance=data.get("provenance"),
            root=path.parent,
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"manifest {path} is missing or has malformed field: {e}") from e
    except ConfigError as e:
        raise DataError(f"manifest {path}: {e}") from e
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    missing = []
    for s in manifest.samples:
        for rel in (s.image, s.semantic_mask, s.instance_mask, s.boxes):
            if rel is not None and not manifest.path(rel).is_file():
                missing.append(str(manifest.path(rel)))
    if missing:
        raise DataError(f"manifest {manifest.name!r} references missing files: {missing[:10]}")
    declared = set(manifest.class_map.ids)
    offending = []
    for s in manifest.samples:
        if s.semantic_mask is None:
            continue
        ids = set(np.unique(read_mask(manifest.path(s.semantic_mask))).tolist())
        if not ids <= declared:
            offending.append(f"{s.semantic_mask} (ids {sorted(ids - declared)})")
    if offending:
        raise DataError(f"semantic masks with undeclared class ids: {offending[:10]}")


def write_manifest(manifest: DatasetManifest, path) -> Path:
    """Write ``manifest`` to ``path``, rewriting sample paths relative to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_root = path.parent.resolve()
    old_root = manifest.root.resolve()

    def rel(p):
        if p is None or new_root == old_root:
            return p
        return os.path.relpath(old_root / p, new_root)

    samples = tuple(
        replace(s, image=rel(s.image), semantic_mask=rel(s.semantic_mask),
                instance_mask=rel(s.instance_mask), boxes=rel(s.boxes))
        for s in manifest.samples
    )
    out = replace(manifest, samples=samples, root=path.parent)
    path.write_text(json.dumps(out.to_json(), indent=2))
    return path


def restrict_labels(manifest: DatasetManifest, labeled_classes: Iterable[int]) -> DatasetManifest:
    """View of ``manifest`` in which only ``labeled_classes`` (plus background) are annotated.

    The class map still declares every output class; unlabeled ids are read
    as background by :func:`load_semantic`.
    """
    cm = manifest.class_map
    return replace(manifest, class_map=ClassMap(cm.entries, tuple(labeled_classes)))


def few_shot_subset(manifest: DatasetManifest, k: int, seed: int) -> DatasetManifest:
    n = len(manifest.samples)
    if k < 0 or k > n:
        raise ConfigError(f"cannot draw {k} samples from a manifest with {n}")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist()) if k else []
    samples = tuple(manifest.samples[i] for i in chosen)
    provenance = {
        "subset_of": manifest.name, "k": k, "seed": seed, "ids": [s.image_id for s in samples]
    }
    return replace(manifest, name=f"{manifest.name}-{k}shot", samples=samples, provenance=provenance)


def compute_normalization(manifest: DatasetManifest):
    """Per-channel mean/std of all pixels in [0, 1] units."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for s in manifest.samples:
        x = read_image(manifest.path(s.image)).reshape(-1, 3).astype(np.float64) / 255.0
        total += x.sum(0)
        total_sq += (x * x).sum(0)
        count += x.shape[0]
    if count == 0:
        return DEFAULT_NORMALIZATION
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-12))
    return tuple(mean.round(6).tolist()), tuple(std.round(6).tolist())


# ---------------------------------------------------------------------------
# corpus adapters

def instance_mask_manifest(
    images_dir, masks_dir, out_path, name: str, split: str, class_id: int = 1, labeled=(0, 1)
) -> DatasetManifest:
    """Manifest for corpora shipping one instance-id PNG per image (MinneApple layout).

    Semantic masks are derived by assigning ``class_id`` to every instance
    pixel and written next to the manifest.
    """
    images_dir, masks_dir, out_path = Path(images_dir), Path(masks_dir), Path(out_path)
    root = out_path.parent
    samples = []
    for img in sorted(images_dir.iterdir()):
        if img.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        inst_path = masks_dir / (img.stem + ".png")
        if not inst_path.is_file():
            raise DataError(f"no instance mask for {img}")
        inst = read_mask(inst_path)
        sem_path = root / "semantic" / f"{img.stem}.png"
        write_mask(sem_path, np.where(inst > 0, class_id, 0))
        samples.append(Sample(
            image=os.path.relpath(img.resolve(), root.resolve()),
            semantic_mask=os.path.relpath(sem_path.resolve(), root.resolve()),
            instance_mask=os.path.relpath(inst_path.resolve(), root.resolve()),
        ))
    manifest = DatasetManifest(
        name=name, split=split, samples=tuple(samples),
        class_map=ClassMap(DEFAULT_CLASSES, labeled), root=root,
    )
    manifest = replace(manifest, normalization=compute_normalization(manifest))
    write_manifest(manifest, out_path)
    return manifest


def box_annotated_manifest(images_dir, boxes_dir, out_path, name: str, split: str) -> DatasetManifest:
    """Manifest for box-only corpora (CitDet after label conversion to box JSON).

    ``boxes_dir`` holds ``{image_stem}.json`` box lists; masks are produced
    later by the ``prepare`` step with an instance-mask oracle.
    """
    images_dir, boxes_dir, out_path = Path(images_dir), Path(boxes_dir), Path(out_path)
    root = out_path.parent.resolve()
    samples = []
    for img in sorted(images_dir.iterdir()):
        if img.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        bp = boxes_dir / f"{img.stem}.json"
        if not bp.is_file():
            raise DataError(f"no box file for {img}")
        samples.append(Sample(
            image=os.path.relpath(img.resolve(), root), boxes=os.path.relpath(bp.resolve(), root)
        ))
    manifest = DatasetManifest(name=name, split=split, samples=tuple(samples), root=out_path.parent)
    manifest = replace(manifest, normalization=compute_normalization(manifest))
    write_manifest(manifest, out_path)
    return manifest
