"""Turn a manifest into training-ready data: masks from boxes, boundaries, expanded crops."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from fruitseg.augment import AugmentConfig, expand_sample, image_seed
from fruitseg.datasets import (
    DatasetManifest,
    Sample,
    load_instance,
    load_sample_boxes,
    read_image,
    read_mask,
    write_image,
    write_manifest,
    write_mask,
)
from fruitseg.errors import DataError, OracleContractError
from fruitseg.targets import InstanceMaskOracle, boxes_to_semantic_mask, make_boundary_mask

log = logging.getLogger(__name__)


def dataset_id(manifest: DatasetManifest) -> str:
    """Name of the corpus a manifest was drawn from; subsets share their parent's id."""
    if manifest.provenance and "subset_of" in manifest.provenance:
        return manifest.provenance["subset_of"]
    return manifest.name


def prepare_dataset(
    manifest: DatasetManifest,
    out_dir,
    oracle: Optional[InstanceMaskOracle] = None,
    expand: bool = False,
    augment: AugmentConfig = AugmentConfig(),
    seed: int = 0,
) -> DatasetManifest:
    """Write masks (and optionally expanded crops) for every sample under ``out_dir``.

    With an ``oracle`` semantic and instance masks are rebuilt from each
    sample's boxes; otherwise the manifest's own masks are used. Boundary
    masks are always written. Crop origins depend only on ``seed``, the corpus
    id and the image id, so every experiment sees the same crops.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = dataset_id(manifest)

    failures = []
    converted = []
    for s in manifest.samples:
        iid = s.image_id
        image = read_image(manifest.path(s.image))
        if oracle is not None:
            boxes = load_sample_boxes(manifest, s)
            if boxes is None:
                failures.append(f"{iid}: no boxes to convert")
                continue
            try:
                semantic, instances = boxes_to_semantic_mask(image, boxes, oracle, image_id=iid)
            except (OracleContractError, DataError) as e:
                failures.append(f"{iid}: {e}")
                continue
            instance = instances.raster
        else:
            if s.semantic_mask is None:
                failures.append(f"{iid}: no semantic mask and no oracle given")
                continue
            # raw ids; label restriction is applied when the derived manifest is read
            semantic = read_mask(manifest.path(s.semantic_mask))
            instance = load_instance(manifest, s)
        converted.append((s, image, semantic, instance))
    if failures:
        raise OracleContractError("mask conversion failed for: " + "; ".join(failures))

    samples = []
    audit = {}
    for s, image, semantic, instance in converted:
        iid = s.image_id
        sem_rel = f"semantic/{iid}.png"
        write_mask(out_dir / sem_rel, semantic)
        inst_rel = None
        if instance is not None:
            inst_rel = f"instances/{iid}.png"
            write_mask(out_dir / inst_rel, instance, dtype=np.uint16)
        boundary_src = instance if instance is not None else semantic
        write_mask(out_dir / "boundary" / f"{iid}.png", make_boundary_mask(boundary_src) * 255)
        if not expand:
            samples.append(Sample(
                image=_rel(manifest.path(s.image), out_dir),
                semantic_mask=sem_rel,
                instance_mask=inst_rel,
                boxes=None if s.boxes is None else _rel(manifest.path(s.boxes), out_dir),
                id=s.id,
            ))
            continue
        crop_seed = image_seed(seed, corpus, iid)
        crops = expand_sample(image, semantic, instance, augment, crop_seed)
        crop_dir = out_dir / "expanded" / iid
        for c in crops:
            stem = f"{c.scale_index}_{c.crop_index}"
            write_image(crop_dir / f"{stem}.png", c.image)
            write_mask(crop_dir / f"{stem}_semantic.png", c.semantic)
            inst = None
            if c.instance is not None:
                inst = f"expanded/{iid}/{stem}_instance.png"
                write_mask(out_dir / inst, c.instance, dtype=np.uint16)
            samples.append(Sample(
                image=f"expanded/{iid}/{stem}.png",
                semantic_mask=f"expanded/{iid}/{stem}_semantic.png",
                instance_mask=inst,
                id=f"{iid}/{stem}",
            ))
        audit[iid] = {
            "seed": crop_seed,
            "scales": list(augment.scales),
            "crop_size": augment.crop_size,
            "origins": [[c.scale_index, c.crop_index, c.origin[0], c.origin[1]] for c in crops],
        }
    if expand:
        (out_dir / "expanded").mkdir(exist_ok=True)
        (out_dir / "expanded" / "crops.json").write_text(json.dumps(audit, indent=2))

    provenance = dict(manifest.provenance or {})
    provenance["subset_of"] = corpus
    provenance["prepared"] = {"expand": expand, "seed": seed, "oracle": oracle is not None}
    derived = replace(manifest, samples=tuple(samples), provenance=provenance, root=out_dir)
    write_manifest(derived, out_dir / "manifest.json")
    return derived


def _rel(path: Path, root: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(root).resolve())
