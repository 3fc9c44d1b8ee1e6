"""Synthetic orchard scenes with exact fruit masks, for desk-scale experiments.

Each scene has foliage texture above a horizon line and soil texture below.
Fruit are shaded discs; a disc whose centre lies above the horizon is fruit on
the tree (class 1), otherwise fruit on the ground (class 2). Discs drawn later
occlude earlier ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Tuple

import cv2
import numpy as np

from fruitseg.datasets import (
    ClassMap,
    DatasetManifest,
    Sample,
    compute_normalization,
    write_boxes,
    write_image,
    write_manifest,
    write_mask,
)
from fruitseg.errors import ConfigError
from fruitseg.targets import Box

MIN_VISIBLE_PIXELS = 6

PALETTES = {
    "citrus_like": {
        "foliage": ((28, 70, 24), (78, 128, 50)),
        "soil": ((104, 86, 62), (158, 132, 98)),
        "fruit": (238, 146, 28),
    },
    "apple_like": {
        "foliage": ((40, 84, 30), (104, 146, 62)),
        "soil": ((88, 76, 56), (140, 118, 84)),
        "fruit": (204, 44, 38),
    },
}


@dataclass(frozen=True)
class SyntheticOrchardConfig:
    n_images: int = 10
    image_size: int = 256
    horizon_fraction: float = 0.6
    fruit_radius_range: Tuple[int, int] = (4, 10)
    fruits_per_image: Tuple[int, int] = (8, 20)
    tree_fraction: float = 0.7
    palette: str = "citrus_like"
    seed: int = 0
    name: str = "synthetic-orchard"
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "fruit_radius_range", tuple(int(v) for v in self.fruit_radius_range))
        object.__setattr__(self, "fruits_per_image", tuple(int(v) for v in self.fruits_per_image))
        if self.n_images < 0:
            raise ConfigError("n_images must be >= 0")
        if self.image_size < 128 or self.image_size % 64:
            raise ConfigError(f"image_size must be a multiple of 64 and >= 128, got {self.image_size}")
        if not 0 < self.horizon_fraction < 1:
            raise ConfigError("horizon_fraction must lie in (0, 1)")
        if not 0 <= self.tree_fraction <= 1:
            raise ConfigError("tree_fraction must lie in [0, 1]")
        r0, r1 = self.fruit_radius_range
        if not 2 <= r0 <= r1:
            raise ConfigError(f"fruit_radius_range must satisfy 2 <= min <= max: {self.fruit_radius_range}")
        f0, f1 = self.fruits_per_image
        if not 0 <= f0 <= f1:
            raise ConfigError(f"fruits_per_image must satisfy 0 <= min <= max: {self.fruits_per_image}")
        if self.palette not in PALETTES:
            raise ConfigError(f"unknown palette {self.palette!r}; expected one of {sorted(PALETTES)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticOrchardConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _noise(rng: np.random.Generator, size: int, octaves=(4, 16, 64)) -> np.ndarray:
    """Smooth value noise in [0, 1]."""
    acc = np.zeros((size, size), np.float32)
    weight = 1.0
    total = 0.0
    for cells in octaves:
        grid = rng.random((cells, cells), dtype=np.float32)
        acc += weight * cv2.resize(grid, (size, size), interpolation=cv2.INTER_CUBIC)
        total += weight
        weight *= 0.5
    acc /= total
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / max(hi - lo, 1e-6)


def _texture(rng, size, colors) -> np.ndarray:
    t = _noise(rng, size)[..., None]
    c0, c1 = (np.asarray(c, np.float32) for c in colors)
    return c0 + t * (c1 - c0)


def render_scene(cfg: SyntheticOrchardConfig, rng: np.random.Generator):
    """Render one scene; returns (rgb uint8, semantic uint8, instance uint16, boxes)."""
    s = cfg.image_size
    palette = PALETTES[cfg.palette]
    horizon = int(round(cfg.horizon_fraction * s))
    image = np.empty((s, s, 3), np.float32)
    image[:horizon] = _texture(rng, s, palette["foliage"])[:horizon]
    image[horizon:] = _texture(rng, s, palette["soil"])[horizon:]

    n = int(rng.integers(cfg.fruits_per_image[0], cfg.fruits_per_image[1] + 1))
    fruits = []
    for _ in range(n):
        r = float(rng.integers(cfg.fruit_radius_range[0], cfg.fruit_radius_range[1] + 1))
        on_tree = rng.random() < cfg.tree_fraction
        cx = float(rng.uniform(0, s))
        cy = float(rng.uniform(0, horizon)) if on_tree else float(rng.uniform(horizon, s))
        cls = 1 if cy < horizon else 2
        tint = rng.uniform(0.85, 1.1)
        fruits.append((cx, cy, r, cls, tint))

    ys, xs = np.mgrid[0:s, 0:s].astype(np.float32) + 0.5

    def rasterize(items):
        raster = np.zeros((s, s), np.int32)
        for k, (cx, cy, r, _, _) in enumerate(items, start=1):
            raster[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = k
        return raster

    raster = rasterize(fruits)
    counts = np.bincount(raster.ravel(), minlength=len(fruits) + 1)
    fruits = [f for k, f in enumerate(fruits, start=1) if counts[k] >= MIN_VISIBLE_PIXELS]
    # removing hidden fruit only exposes more of the others
    raster = rasterize(fruits)

    base = np.asarray(palette["fruit"], np.float32)
    boxes = []
    semantic = np.zeros((s, s), np.uint8)
    for k, (cx, cy, r, cls, tint) in enumerate(fruits, start=1):
        sel = raster == k
        d2 = ((xs[sel] - cx) ** 2 + (ys[sel] - cy) ** 2) / (r * r)
        hl = ((xs[sel] - cx + 0.35 * r) ** 2 + (ys[sel] - cy + 0.35 * r) ** 2) / (r * r)
        shade = (1.0 - 0.4 * d2)[:, None] + 0.25 * np.exp(-6.0 * hl)[:, None]
        if cls == 2:
            shade = shade * 0.8
        image[sel] = base * tint * shade
        semantic[sel] = cls
        yy, xx = np.nonzero(sel)
        boxes.append(Box(int(xx.min()), int(yy.min()), int(xx.max()) + 1, int(yy.max()) + 1, cls))

    image += rng.normal(0.0, 4.0, image.shape).astype(np.float32)
    rgb = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return rgb, semantic, raster.astype(np.uint16), boxes


def generate_synthetic_orchard(cfg: SyntheticOrchardConfig, out_dir) -> DatasetManifest:
    """Render ``cfg.n_images`` scenes under ``out_dir`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out_dir} is not writable: {e}") from e

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_images)
    samples = []
    for i, ss in enumerate(seeds):
        rgb, semantic, instance, boxes = render_scene(cfg, np.random.default_rng(ss))
        iid = f"{i:05d}"
        write_image(out_dir / "images" / f"{iid}.png", rgb)
        write_mask(out_dir / "semantic" / f"{iid}.png", semantic)
        write_mask(out_dir / "instances" / f"{iid}.png", instance, dtype=np.uint16)
        write_boxes(out_dir / "boxes" / f"{iid}.json", boxes)
        samples.append(Sample(
            image=f"images/{iid}.png",
            semantic_mask=f"semantic/{iid}.png",
            instance_mask=f"instances/{iid}.png",
            boxes=f"boxes/{iid}.json",
        ))
    manifest = DatasetManifest(
        name=cfg.name, split=cfg.split, samples=tuple(samples), class_map=ClassMap(),
        provenance={"generator": "synthetic_orchard", "config": json.loads(json.dumps(cfg.to_dict()))},
        root=out_dir,
    )
    manifest = replace(manifest, normalization=compute_normalization(manifest))
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
