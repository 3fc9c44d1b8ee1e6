import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY, tiny_cfg
from fruitseg.checkpoint import save_checkpoint
from fruitseg.cli import OVERLAY_STYLES, OverlayStyle, exit_code_for, main, overlay
from fruitseg.datasets import read_image, read_mask, write_image
from fruitseg.errors import ConfigError, DataError, OracleContractError, ShapeError, UndefinedMetricError
from fruitseg.model import build_model


def blend_reference(image, mask, style):
    out = image.astype(np.float64).copy()
    for cls, color in ((1, style.tree_color), (2, style.ground_color)):
        for y, x in zip(*np.nonzero(mask == cls)):
            for c in range(3):
                out[y, x, c] = round((1 - style.alpha) * image[y, x, c] + style.alpha * color[c])
    return out.astype(np.uint8)


def synth(tmp_path, name, n=2, split="train", size=128, seed=0, **extra):
    cfg = tmp_path / f"{name}.json"
    cfg.write_text(json.dumps({"n_images": n, "image_size": size, "seed": seed, "split": split, **extra}))
    assert main(["synth", str(cfg), str(tmp_path / name)]) == 0
    return tmp_path / name / "manifest.json"


@pytest.fixture
def checkpoint(tmp_path):
    save_checkpoint(build_model(tiny_cfg(), seed=0), tmp_path / "ckpt")
    return tmp_path / "ckpt"


class TestOverlay:
    def test_default_palette(self):
        style = OverlayStyle()
        assert style.tree_color == (0, 255, 255) and style.ground_color == (255, 0, 255)
        assert OVERLAY_STYLES["red_blue"].tree_color == (255, 0, 0)

    def test_invalid_styles(self):
        with pytest.raises(ConfigError):
            OverlayStyle(tree_color=(1, 2, 3), ground_color=(1, 2, 3))
        with pytest.raises(ConfigError):
            OverlayStyle(alpha=1.5)
        with pytest.raises(ConfigError):
            OverlayStyle(tree_color=(0, 0, 300))

    def test_alpha_zero_identity(self, rng):
        image = rng.integers(0, 256, (9, 9, 3), dtype=np.uint8)
        mask = rng.integers(0, 3, (9, 9))
        assert np.array_equal(overlay(image, mask, OverlayStyle(alpha=0.0)), image)

    def test_alpha_one_paints_exact_color(self, rng):
        image = rng.integers(0, 256, (9, 9, 3), dtype=np.uint8)
        mask = rng.integers(0, 3, (9, 9))
        out = overlay(image, mask, OverlayStyle(alpha=1.0))
        assert np.all(out[mask == 1] == (0, 255, 255))
        assert np.all(out[mask == 2] == (255, 0, 255))
        assert np.array_equal(out[mask == 0], image[mask == 0])

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.uint8, (5, 6, 3)), arrays(np.uint8, (5, 6), elements=st.integers(0, 2)),
           st.floats(0, 1), st.sampled_from(sorted(OVERLAY_STYLES)))
    def test_blend_law(self, image, mask, alpha, name):
        base = OVERLAY_STYLES[name]
        style = OverlayStyle(base.tree_color, base.ground_color, alpha)
        assert np.array_equal(overlay(image, mask, style), blend_reference(image, mask, style))


class TestExitCodes:
    def test_mapping(self):
        assert exit_code_for(ConfigError("x")) == 2
        assert exit_code_for(DataError("x")) == 3
        assert exit_code_for(OracleContractError("x")) == 3
        assert exit_code_for(ShapeError("x")) == 3
        assert exit_code_for(UndefinedMetricError("x")) == 4
        assert exit_code_for(RuntimeError("x")) == 4


class TestSynth:
    def test_valid(self, tmp_path, capsys):
        path = synth(tmp_path, "s")
        assert str(path) in capsys.readouterr().out
        assert len(json.loads(path.read_text())["samples"]) == 2

    def test_unwritable(self, tmp_path):
        (tmp_path / "blocker").write_text("")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_images": 1, "image_size": 128}))
        assert main(["synth", str(cfg), str(tmp_path / "blocker" / "out")]) == 2

    def test_empty(self, tmp_path):
        path = synth(tmp_path, "s", n=0)
        assert json.loads(path.read_text())["samples"] == []

    def test_bad_config_field(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_images": 1, "colour": "red"}))
        assert main(["synth", str(cfg), str(tmp_path / "o")]) == 2

    def test_seed_flag_after_subcommand(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_images": 1, "image_size": 128, "seed": 1}))
        assert main(["synth", str(cfg), str(tmp_path / "a"), "--seed", "5"]) == 0
        assert main(["--seed", "5", "synth", str(cfg), str(tmp_path / "b")]) == 0
        prov = json.loads((tmp_path / "a" / "manifest.json").read_text())["provenance"]
        assert prov["config"]["seed"] == 5
        assert (tmp_path / "a" / "images" / "00000.png").read_bytes() == \
            (tmp_path / "b" / "images" / "00000.png").read_bytes()


class TestPrepare:
    def test_expand_forty(self, tmp_path):
        m = synth(tmp_path, "s")
        assert main(["prepare", str(m), str(tmp_path / "p"), "--expand", "--crop-size", "96"]) == 0
        assert len(json.loads((tmp_path / "p" / "manifest.json").read_text())["samples"]) == 40

    def test_boxless_with_oracle(self, tmp_path, capsys):
        m = synth(tmp_path, "s")
        data = json.loads(m.read_text())
        for s in data["samples"]:
            s.pop("boxes")
        m.write_text(json.dumps(data))
        assert main(["prepare", str(m), str(tmp_path / "p"), "--oracle", "ellipse"]) == 3
        assert "00000" in capsys.readouterr().err

    def test_bad_oracle_spec(self, tmp_path):
        m = synth(tmp_path, "s")
        assert main(["prepare", str(m), str(tmp_path / "p"), "--oracle", "sam"]) == 2

    def test_rerun_identical(self, tmp_path):
        m = synth(tmp_path, "s")
        for out in ("a", "b"):
            assert main(["prepare", str(m), str(tmp_path / out), "--expand", "--crop-size", "96", "--seed", "3"]) == 0
        for p in sorted((tmp_path / "a").rglob("*.png")):
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


class TestTrainEval:
    def _run_config(self, tmp_path, **data):
        train = synth(tmp_path, "train", n=4)
        val = synth(tmp_path, "val", n=2, split="val", seed=1)
        cfg = {
            "regime": "scratch",
            "arch": {**TINY},
            "data": {"train_manifest": str(train), "eval_manifest": str(val), **data},
            "overrides": {"epochs": 1},
            "seed": 0,
            "out_dir": str(tmp_path / "run"),
        }
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_zero_shot_k_points_to_eval(self, tmp_path, capsys):
        path = self._run_config(tmp_path, few_shot_k=0)
        assert main(["train", str(path)]) == 2
        assert "fruitseg eval" in capsys.readouterr().err

    def test_train_then_eval(self, tmp_path):
        path = self._run_config(tmp_path)
        assert main(["train", str(path)]) == 0
        resolved = json.loads((tmp_path / "run" / "run_config.resolved.json").read_text())
        assert resolved["regime"]["base_lr"] == 7.5e-3 and resolved["regime"]["epochs"] == 1
        out = tmp_path / "report.json"
        assert main(["eval", str(tmp_path / "run" / "best"), str(tmp_path / "val" / "manifest.json"),
                     "--remap-ground", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["remap_applied"] is True and 0 <= report["miou"] <= 1

    def test_unknown_override(self, tmp_path):
        path = self._run_config(tmp_path)
        cfg = json.loads(path.read_text())
        cfg["overrides"]["learning_rate"] = 0.1
        path.write_text(json.dumps(cfg))
        assert main(["train", str(path)]) == 2

    def test_zero_shot_eval(self, tmp_path, checkpoint):
        m = synth(tmp_path, "test", n=2, split="test", palette="apple_like")
        assert main(["eval", str(checkpoint), str(m), "--remap-ground"]) == 0
        assert (checkpoint / "eval_report.json").is_file()

    def test_class_count_mismatch(self, tmp_path):
        save_checkpoint(build_model(tiny_cfg(num_classes=4)), tmp_path / "ckpt4")
        m = synth(tmp_path, "test", n=1, split="test")
        assert main(["eval", str(tmp_path / "ckpt4"), str(m)]) == 2

    def test_missing_manifest(self, tmp_path, checkpoint):
        assert main(["eval", str(checkpoint), str(tmp_path / "none.json")]) == 3


class TestPredict:
    def test_one_image_two_files(self, tmp_path, checkpoint):
        write_image(tmp_path / "in" / "a.png", np.full((128, 128, 3), 90, np.uint8))
        assert main(["predict", str(checkpoint), str(tmp_path / "in" / "*.png"), str(tmp_path / "out")]) == 0
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["a_overlay.png", "a_pred.png"]

    def test_overlay_obeys_blend_law(self, tmp_path, checkpoint, rng):
        write_image(tmp_path / "in" / "a.png", rng.integers(0, 256, (128, 192, 3), dtype=np.uint8))
        assert main(["predict", str(checkpoint), str(tmp_path / "in" / "*.png"), str(tmp_path / "out"),
                     "--style", "red_blue", "--alpha", "0.3"]) == 0
        image = read_image(tmp_path / "in" / "a.png")
        mask = read_mask(tmp_path / "out" / "a_pred.png")
        style = OverlayStyle((255, 0, 0), (0, 0, 255), 0.3)
        assert np.array_equal(read_image(tmp_path / "out" / "a_overlay.png"), blend_reference(image, mask, style))

    def test_alpha_zero_overlay_is_input(self, tmp_path, checkpoint, rng):
        write_image(tmp_path / "in" / "a.png", rng.integers(0, 256, (128, 128, 3), dtype=np.uint8))
        assert main(["predict", str(checkpoint), str(tmp_path / "in" / "a.png"), str(tmp_path / "out"),
                     "--alpha", "0"]) == 0
        assert np.array_equal(read_image(tmp_path / "out" / "a_overlay.png"), read_image(tmp_path / "in" / "a.png"))

    def test_unreadable_files(self, tmp_path, checkpoint, caplog):
        (tmp_path / "in").mkdir()
        (tmp_path / "in" / "bad.png").write_bytes(b"not an image")
        write_image(tmp_path / "in" / "good.png", np.zeros((128, 128, 3), np.uint8))
        assert main(["predict", str(checkpoint), str(tmp_path / "in" / "*.png"), str(tmp_path / "out")]) == 0
        assert "bad.png" in caplog.text
        assert main(["predict", str(checkpoint), str(tmp_path / "in" / "bad.png"), str(tmp_path / "o2")]) == 3

    def test_no_matches(self, tmp_path, checkpoint):
        assert main(["predict", str(checkpoint), str(tmp_path / "*.png"), str(tmp_path / "out")]) == 3
