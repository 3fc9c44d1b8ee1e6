"""Checkpoint directories: ``weights.safetensors`` plus ``manifest.json``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import torch
from safetensors.torch import load_file, save_file

from fruitseg.errors import ConfigError, DataError
from fruitseg.model import ArchitectureConfig, FruitSegNet, build_model

CHECKPOINT_FORMAT = 1
WEIGHTS_FILE = "weights.safetensors"
MANIFEST_FILE = "manifest.json"


def save_checkpoint(
    model: FruitSegNet,
    out_dir,
    *,
    class_map: Optional[dict] = None,
    source_regime: Optional[str] = None,
    selection_metric: str = "miou",
    selection_value: Optional[float] = None,
    epoch: Optional[int] = None,
    normalization=None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    save_file(state, str(out_dir / WEIGHTS_FILE))
    cfg = model.cfg
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "variant": cfg.variant,
        "num_classes": cfg.num_classes,
        "branch_width": cfg.branch_width,
        "head_width": cfg.head_width,
        "class_map": class_map or {"0": "background", "1": "fruit_on_tree", "2": "fruit_on_ground"},
        "source_regime": source_regime,
        "selection_metric": selection_metric,
        "selection_value": selection_value,
        "epoch": epoch,
        "arch": cfg.to_dict(),
    }
    if normalization is not None:
        manifest["normalization"] = {"mean": list(normalization[0]), "std": list(normalization[1])}
    (out_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    return out_dir


def read_checkpoint_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text())
    except OSError as e:
        raise DataError(f"cannot read checkpoint manifest in {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed checkpoint manifest in {path}: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
    return manifest


def checkpoint_config(manifest: dict) -> ArchitectureConfig:
    """Architecture of a checkpoint, cross-checked against its top-level fields."""
    cfg = ArchitectureConfig.from_dict(manifest["arch"])
    for key in ("variant", "num_classes", "branch_width", "head_width"):
        if manifest.get(key) != getattr(cfg, key):
            raise ConfigError(
                f"checkpoint manifest field {key}={manifest.get(key)!r} disagrees with arch {getattr(cfg, key)!r}"
            )
    return cfg


def load_state(path) -> dict:
    path = Path(path)
    weights = path / WEIGHTS_FILE if path.is_dir() else path
    if not weights.is_file():
        raise DataError(f"no weights file at {weights}")
    if weights.suffix == ".safetensors":
        return load_file(str(weights))
    state = torch.load(str(weights), map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return state


def load_checkpoint(path, expected: Optional[ArchitectureConfig] = None):
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``.

    With ``expected`` the stored architecture must match it exactly.
    """
    manifest = read_checkpoint_manifest(path)
    cfg = checkpoint_config(manifest)
    if expected is not None and expected != cfg:
        raise ConfigError(f"checkpoint architecture {cfg} does not match expected {expected}")
    model = build_model(cfg)
    missing, unexpected = model.load_state_dict(load_state(path), strict=False)
    if missing or unexpected:
        raise DataError(
            f"checkpoint {path} does not match its architecture: missing={missing[:5]} unexpected={unexpected[:5]}"
        )
    return model, manifest
