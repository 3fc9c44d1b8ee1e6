"""Training-target generation: boundary masks and box-to-mask conversion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import cv2
import numpy as np

from fruitseg.errors import ConfigError, DataError, OracleContractError

log = logging.getLogger(__name__)

CANNY_LOW = 50
CANNY_HIGH = 150
DILATE_RADIUS = 2

FRUIT_CLASSES = (1, 2)


@dataclass
class InstanceMask:
    raster: np.ndarray
    class_of: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.raster = np.asarray(self.raster)
        if self.raster.ndim != 2:
            raise ConfigError(f"instance raster must be 2-D, got shape {self.raster.shape}")
        if self.raster.size and self.raster.min() < 0:
            raise ConfigError("instance ids must be non-negative")
        missing = set(int(i) for i in np.unique(self.raster)) - {0} - set(self.class_of)
        if missing:
            raise ConfigError(f"instance ids without a class: {sorted(missing)}")

    @property
    def ids(self) -> List[int]:
        return [int(i) for i in np.unique(self.raster) if i != 0]

    def semantic(self) -> np.ndarray:
        """Class-id raster obtained by looking up each pixel's instance class."""
        out = np.zeros(self.raster.shape, dtype=np.uint8)
        for iid, cls in self.class_of.items():
            out[self.raster == iid] = cls
        return out


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates; ``x_max``/``y_max`` are exclusive."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    class_id: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError(f"degenerate box {self}")
        if self.class_id not in FRUIT_CLASSES:
            raise ConfigError(f"box class_id must be one of {FRUIT_CLASSES}, got {self.class_id}")

    def clip(self, height: int, width: int) -> Tuple[int, int, int, int]:
        """Clipped ``(x_min, y_min, x_max, y_max)``; may be empty if the box lies outside."""
        return (
            max(0, int(self.x_min)), max(0, int(self.y_min)),
            min(width, int(self.x_max)), min(height, int(self.y_max)),
        )

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max,
                "y_max": self.y_max, "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(int(d["x_min"]), int(d["y_min"]), int(d["x_max"]), int(d["y_max"]), int(d["class_id"]))


# (image, box, image_id, box_index) -> bool mask with the image's height/width
InstanceMaskOracle = Callable[[np.ndarray, Box, str, int], np.ndarray]


def make_boundary_mask(
    instances: InstanceMask | np.ndarray,
    canny_low: float = CANNY_LOW,
    canny_high: float = CANNY_HIGH,
    dilate_radius: int = DILATE_RADIUS,
) -> np.ndarray:
    """Binary boundary raster from an instance raster.

    Each instance is binarized to 0/255 and passed through Canny on its own,
    so touching instances keep the edge between them. The union of edges is
    dilated with a square element of side ``2 * dilate_radius + 1``.
    """
    if canny_low > canny_high:
        raise ConfigError(f"canny_low ({canny_low}) exceeds canny_high ({canny_high})")
    if dilate_radius < 0:
        raise ConfigError(f"dilate_radius must be >= 0, got {dilate_radius}")
    raster = instances.raster if isinstance(instances, InstanceMask) else np.asarray(instances)
    edges = np.zeros(raster.shape, dtype=np.uint8)
    for iid in np.unique(raster):
        if iid == 0:
            continue
        binary = np.where(raster == iid, 255, 0).astype(np.uint8)
        edges |= cv2.Canny(binary, canny_low, canny_high)
    if dilate_radius > 0:
        side = 2 * dilate_radius + 1
        edges = cv2.dilate(edges, np.ones((side, side), np.uint8))
    return (edges > 0).astype(np.uint8)


def fallback_ellipse_oracle(image: np.ndarray, box: Box, image_id: str = "", box_index: int = 0) -> np.ndarray:
    """Axis-aligned ellipse inscribed in ``box``, tested at pixel centres."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = box.clip(h, w)
    mask = np.zeros((h, w), dtype=bool)
    if x0 >= x1 or y0 >= y1:
        return mask
    # ellipse of the unclipped box; clipping only limits where it is drawn
    cx, cy = (box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0
    ax, ay = (box.x_max - box.x_min) / 2.0, (box.y_max - box.y_min) / 2.0
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = ((xs + 0.5 - cx) / ax) ** 2 + ((ys + 0.5 - cy) / ay) ** 2 <= 1.0
    mask[y0:y1, x0:x1] = inside
    return mask


def external_oracle_adapter(mask_dir: str | Path) -> InstanceMaskOracle:
    """Oracle reading precomputed per-box masks ``{image_id}_{box_index}.png`` (8-bit, 0/255)."""
    mask_dir = Path(mask_dir)

    def oracle(image: np.ndarray, box: Box, image_id: str, box_index: int) -> np.ndarray:
        path = mask_dir / f"{image_id}_{box_index}.png"
        if not path.is_file():
            raise OracleContractError(
                f"missing oracle mask for image_id={image_id} box_index={box_index}: {path}"
            )
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise DataError(f"unreadable oracle mask {path}")
        if raw.ndim != 2 or raw.dtype != np.uint8:
            raise DataError(f"oracle mask {path} must be single-channel 8-bit")
        bad = set(np.unique(raw).tolist()) - {0, 255}
        if bad:
            raise DataError(f"oracle mask {path} has values other than 0/255: {sorted(bad)[:5]}")
        if raw.shape != image.shape[:2]:
            raise OracleContractError(
                f"oracle mask {path} has shape {raw.shape}, image is {image.shape[:2]}"
            )
        return raw == 255

    return oracle


def boxes_to_semantic_mask(
    image: np.ndarray,
    boxes: Sequence[Box],
    oracle: InstanceMaskOracle = fallback_ellipse_oracle,
    image_id: str = "",
) -> Tuple[np.ndarray, InstanceMask]:
    """Combine per-box oracle masks into semantic and instance rasters.

    Instances are numbered ``1..len(boxes)`` in input order and later boxes
    overwrite earlier ones where they overlap.
    """
    h, w = image.shape[:2]
    raster = np.zeros((h, w), dtype=np.uint16)
    class_of: Dict[int, int] = {}
    for index, box in enumerate(boxes):
        mask = np.asarray(oracle(image, box, image_id, index), dtype=bool)
        if mask.shape != (h, w):
            raise OracleContractError(f"box {index}: oracle mask shape {mask.shape} != image {(h, w)}")
        x0, y0, x1, y1 = box.clip(h, w)
        outside = mask.copy()
        outside[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = False
        if outside.any():
            raise OracleContractError(
                f"box {index}: oracle mask has {int(outside.sum())} pixels outside its box"
            )
        if not mask.any():
            log.warning("box %d produced an empty oracle mask; instance skipped", index)
            continue
        raster[mask] = index + 1
        class_of[index + 1] = box.class_id
    # drop instances fully overwritten by later boxes
    present = set(int(i) for i in np.unique(raster)) - {0}
    class_of = {k: v for k, v in class_of.items() if k in present}
    instances = InstanceMask(raster, class_of)
    return instances.semantic(), instances
