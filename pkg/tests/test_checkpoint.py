import json

import pytest
import torch
from safetensors.torch import load_file

from conftest import tiny_cfg
from fruitseg.checkpoint import load_checkpoint, read_checkpoint_manifest, save_checkpoint
from fruitseg.errors import ConfigError, DataError
from fruitseg.model import build_model

REQUIRED = {"format_version", "variant", "num_classes", "branch_width", "head_width", "class_map",
            "source_regime", "selection_metric", "selection_value", "epoch"}


@pytest.mark.parametrize("variant", ["three_branch", "two_branch"])
def test_roundtrip(tmp_path, variant):
    model = build_model(tiny_cfg(variant), seed=3)
    save_checkpoint(model, tmp_path, source_regime="scratch", selection_value=0.5, epoch=7)
    assert REQUIRED <= set(json.loads((tmp_path / "manifest.json").read_text()))
    flat = load_file(str(tmp_path / "weights.safetensors"))
    assert set(flat) == set(model.state_dict())
    loaded, manifest = load_checkpoint(tmp_path)
    assert loaded.cfg == model.cfg and manifest["epoch"] == 7
    for k, v in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)


def test_expected_config_checked(tmp_path):
    save_checkpoint(build_model(tiny_cfg()), tmp_path)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path, expected=tiny_cfg("two_branch"))


def test_manifest_fields_cross_checked(tmp_path):
    save_checkpoint(build_model(tiny_cfg()), tmp_path)
    data = json.loads((tmp_path / "manifest.json").read_text())
    data["branch_width"] = 999
    (tmp_path / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path)


def test_missing_or_bad_manifest(tmp_path):
    with pytest.raises(DataError):
        read_checkpoint_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(DataError):
        read_checkpoint_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(DataError):
        read_checkpoint_manifest(tmp_path)


def test_weights_must_match_architecture(tmp_path):
    save_checkpoint(build_model(tiny_cfg()), tmp_path / "a")
    save_checkpoint(build_model(tiny_cfg("two_branch")), tmp_path / "b")
    (tmp_path / "a" / "weights.safetensors").write_bytes((tmp_path / "b" / "weights.safetensors").read_bytes())
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "a")
