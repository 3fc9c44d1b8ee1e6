"""Offline multi-scale crop expansion and online horizontal flipping."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Tuple

import cv2
import numpy as np

from fruitseg.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class AugmentConfig:
    scales: Tuple[float, ...] = (0.75, 1.0, 1.25, 1.5)
    crops_per_scale: int = 5
    crop_size: int = 512
    pad_mode: str = "reflect"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be non-empty and positive: {self.scales}")
        if self.crops_per_scale < 1:
            raise ConfigError(f"crops_per_scale must be >= 1, got {self.crops_per_scale}")
        if self.crop_size <= 0:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")
        if self.pad_mode != "reflect":
            raise ConfigError(f"unsupported pad_mode {self.pad_mode!r}")

    @property
    def crops_per_image(self) -> int:
        return len(self.scales) * self.crops_per_scale


@dataclass
class Crop:
    image: np.ndarray
    semantic: np.ndarray
    instance: Optional[np.ndarray]
    scale_index: int
    crop_index: int
    origin: Tuple[int, int]  # (y, x) in the padded scaled raster


def image_seed(base_seed: int, dataset: str, image_id: str) -> int:
    """Stable per-image seed derived from ``(dataset, image_id)`` only."""
    digest = hashlib.sha256(f"{base_seed}/{dataset}/{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def crop_origin(seed: int, scale_index: int, crop_index: int, height: int, width: int, size: int):
    """Uniform crop origin; a pure function of its arguments."""
    rng = np.random.default_rng([seed, scale_index, crop_index])
    y = int(rng.integers(0, height - size + 1))
    x = int(rng.integers(0, width - size + 1))
    return y, x


def _pad_to(raster: np.ndarray, size: int) -> np.ndarray:
    h, w = raster.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return raster
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (raster.ndim - 2)
    # numpy reflects repeatedly when the pad exceeds the raster
    return np.pad(raster, pad, mode="reflect")


def _resize(raster: np.ndarray, height: int, width: int, interpolation: int) -> np.ndarray:
    if raster.shape[:2] == (height, width):
        return raster.copy()
    return cv2.resize(raster, (width, height), interpolation=interpolation)


def expand_sample(
    image: np.ndarray,
    semantic_mask: np.ndarray,
    instance_mask: Optional[np.ndarray],
    cfg: AugmentConfig = AugmentConfig(),
    seed: int = 0,
) -> List[Crop]:
    """Expand one annotated image into ``len(scales) * crops_per_scale`` crops.

    Images are resized bilinearly and masks with nearest neighbour, so crops
    never contain class or instance ids absent from the source.
    """
    h, w = image.shape[:2]
    for name, m in (("semantic", semantic_mask), ("instance", instance_mask)):
        if m is not None and m.shape[:2] != (h, w):
            raise ShapeError(f"{name} mask shape {m.shape[:2]} != image shape {(h, w)}")
    crops = []
    size = cfg.crop_size
    for si, scale in enumerate(cfg.scales):
        sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        img = _pad_to(_resize(image, sh, sw, cv2.INTER_LINEAR), size)
        sem = _pad_to(_resize(semantic_mask, sh, sw, cv2.INTER_NEAREST), size)
        ins = None
        if instance_mask is not None:
            ins = _pad_to(_resize(instance_mask, sh, sw, cv2.INTER_NEAREST), size)
        ph, pw = img.shape[:2]
        for ci in range(cfg.crops_per_scale):
            y, x = crop_origin(seed, si, ci, ph, pw, size)
            window = (slice(y, y + size), slice(x, x + size))
            crops.append(Crop(
                image=np.ascontiguousarray(img[window]),
                semantic=np.ascontiguousarray(sem[window]),
                instance=None if ins is None else np.ascontiguousarray(ins[window]),
                scale_index=si,
                crop_index=ci,
                origin=(y, x),
            ))
    return crops


def random_hflip(
    image: np.ndarray,
    semantic_mask: np.ndarray,
    boundary_mask: Optional[np.ndarray],
    rng: np.random.Generator,
    p: float = 0.5,
):
    """Mirror all rasters about the vertical axis with probability ``p``.

    Returns ``((image, semantic, boundary), rng)``; ``rng`` is advanced by one
    draw whether or not the flip happens.
    """
    flip = rng.random() < p
    rasters = (image, semantic_mask, boundary_mask)
    if flip:
        rasters = tuple(None if r is None else np.ascontiguousarray(r[:, ::-1]) for r in rasters)
    return rasters, rng
