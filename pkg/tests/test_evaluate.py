import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_cfg
from fruitseg.checkpoint import save_checkpoint
from fruitseg.datasets import load_semantic, read_mask, restrict_labels
from fruitseg.errors import ConfigError, ShapeError, UndefinedMetricError
from fruitseg.evaluate import (
    ConfusionMatrix,
    accumulate,
    evaluate_checkpoint,
    evaluate_model,
    evaluate_predictions,
    miou,
    per_class_iou,
    pixel_accuracy,
    predict_logits,
    remap_ground_to_background,
)
from fruitseg.model import build_model
from fruitseg.synthetic import SyntheticOrchardConfig, generate_synthetic_orchard

masks = arrays(np.uint8, (6, 7), elements=st.integers(0, 2))


def brute_force_counts(pairs, k):
    counts = [[0] * k for _ in range(k)]
    for pred, gt in pairs:
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            counts[g][p] += 1
    return counts


@pytest.fixture(scope="module")
def test_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    return generate_synthetic_orchard(
        SyntheticOrchardConfig(n_images=3, image_size=128, seed=8, split="test"), root)


class TestRemap:
    def test_no_ground_unchanged(self):
        m = np.array([[0, 1], [1, 0]], np.uint8)
        assert np.array_equal(remap_ground_to_background(m), m)

    def test_all_ground(self):
        assert not remap_ground_to_background(np.full((3, 3), 2, np.uint8)).any()

    @given(masks)
    def test_histogram(self, m):
        out = remap_ground_to_background(m)
        before, after = np.bincount(m.ravel(), minlength=3), np.bincount(out.ravel(), minlength=3)
        assert after[0] == before[0] + before[2] and after[1] == before[1] and after[2] == 0


class TestConfusion:
    def test_diagonal_only(self):
        m = np.array([[0, 1, 2], [2, 2, 1]])
        cm = accumulate(ConfusionMatrix(3), m, m)
        assert np.array_equal(cm.counts, np.diag(np.bincount(m.ravel(), minlength=3)))

    def test_toy_matches_enumeration(self):
        gt = np.array([[0, 0, 1, 1], [0, 2, 2, 1], [1, 1, 0, 0], [2, 2, 2, 0]])
        pred = np.array([[0, 1, 1, 1], [0, 2, 0, 1], [1, 2, 0, 0], [2, 0, 2, 1]])
        cm = accumulate(ConfusionMatrix(3), pred, gt)
        assert cm.counts.tolist() == brute_force_counts([(pred, gt)], 3)
        assert cm.total == 16

    @settings(max_examples=30)
    @given(st.lists(st.tuples(masks, masks), min_size=1, max_size=5), st.randoms())
    def test_order_independent(self, pairs, random):
        a = evaluate_predictions(pairs, 3, remap=False)
        shuffled = list(pairs)
        random.shuffle(shuffled)
        b = evaluate_predictions(shuffled, 3, remap=False)
        assert np.array_equal(a.counts, b.counts)
        assert a.counts.tolist() == brute_force_counts(pairs, 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            accumulate(ConfusionMatrix(3), np.zeros((2, 2)), np.zeros((2, 3)))

    def test_out_of_range_ids(self):
        with pytest.raises(ShapeError):
            accumulate(ConfusionMatrix(3), np.full((2, 2), 3), np.zeros((2, 2)))


class TestMetrics:
    def test_perfect(self):
        cm = ConfusionMatrix(3, np.diag([5, 3, 2]))
        assert miou(cm) == 1.0 and pixel_accuracy(cm) == 1.0

    def test_two_class_arithmetic(self):
        cm = ConfusionMatrix(2, [[3, 1], [2, 2]])
        assert per_class_iou(cm) == {0: 3 / 6, 1: 2 / 5}
        assert miou(cm) == pytest.approx(0.45, abs=1e-15)
        assert pixel_accuracy(cm) == 5 / 8

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix(3, [[3, 1, 0], [2, 2, 0], [0, 0, 0]])
        assert 2 not in per_class_iou(cm)
        assert miou(cm) == pytest.approx(0.45, abs=1e-15)

    def test_empty_matrix(self):
        with pytest.raises(UndefinedMetricError):
            miou(ConfusionMatrix(3))
        with pytest.raises(UndefinedMetricError):
            pixel_accuracy(ConfusionMatrix(3))

    @settings(max_examples=50)
    @given(st.lists(st.tuples(masks, masks), min_size=1, max_size=4), st.booleans())
    def test_bounds(self, pairs, remap):
        cm = evaluate_predictions(pairs, 3, remap)
        m, pa = miou(cm), pixel_accuracy(cm)
        assert 0 <= m <= 1 and 0 <= pa <= 1
        assert pa >= np.diag(cm.counts).max() / cm.total

    @settings(max_examples=50)
    @given(st.lists(st.tuples(masks, masks), min_size=1, max_size=4))
    def test_remap_commutes_with_counting(self, pairs):
        remapped_first = evaluate_predictions(
            [(remap_ground_to_background(p), remap_ground_to_background(g)) for p, g in pairs], 3, False)
        assert np.array_equal(remapped_first.counts, evaluate_predictions(pairs, 3, True).counts)
        # remapping a matrix folds row and column 2 into 0
        c = evaluate_predictions(pairs, 3, False).counts
        folded = np.zeros((3, 3), np.int64)
        for g in range(3):
            for p in range(3):
                folded[0 if g == 2 else g, 0 if p == 2 else p] += c[g, p]
        assert np.array_equal(folded, remapped_first.counts)


class TestModelEvaluation:
    def test_predict_logits_pads_and_crops(self):
        model = build_model(tiny_cfg()).eval()
        x = torch.randn(1, 3, 100, 150)
        assert predict_logits(model, x).shape == (1, 3, 100, 150)
        assert model.training is False

    def test_predict_logits_restores_mode(self):
        model = build_model(tiny_cfg()).train()
        predict_logits(model, torch.randn(1, 3, 128, 128))
        assert model.training

    def test_below_minimum(self):
        with pytest.raises(ShapeError):
            predict_logits(build_model(tiny_cfg()), torch.randn(1, 3, 32, 128))

    def test_argmax_invariant_to_logit_scaling(self):
        model = build_model(tiny_cfg()).eval()
        x = torch.randn(1, 3, 128, 128)
        logits = predict_logits(model, x)
        assert torch.equal(logits.argmax(1), (logits * 3.7).argmax(1))

    def test_oracle_predictor_scores_one(self, test_split):
        def oracle(images, samples):
            return [load_semantic(test_split, s) for s in samples]

        report = evaluate_model(None, test_split, predictor=oracle)
        assert report.miou == 1.0 and report.pixel_accuracy == 1.0
        assert report.n_images == 3

    def test_remap_changes_only_ground(self, test_split):
        def all_ground(images, samples):
            return [np.full(im.shape[:2], 2, np.uint8) for im in images]

        raw = evaluate_model(None, test_split, predictor=all_ground)
        remapped = evaluate_model(None, test_split, remap=True, predictor=all_ground)
        gts = [read_mask(test_split.path(s.semantic_mask)) for s in test_split.samples]
        expected = evaluate_predictions(
            [(np.full(g.shape, 2, np.uint8), g) for g in gts], 3, remap=True)
        assert remapped.confusion == expected.counts.tolist()
        assert remapped.remap_applied and not raw.remap_applied
        assert "fruit_on_ground" in raw.per_class_iou and "fruit_on_ground" not in remapped.per_class_iou

    def test_checkpoint_report(self, test_split, tmp_path):
        save_checkpoint(build_model(tiny_cfg(), seed=1), tmp_path / "ckpt")
        out = tmp_path / "report.json"
        report = evaluate_checkpoint(tmp_path / "ckpt", restrict_labels(test_split, [1]), remap=True, out_path=out)
        data = json.loads(out.read_text())
        for key in ("checkpoint_id", "manifest", "n_images", "remap_applied", "per_class_iou", "miou",
                    "pixel_accuracy"):
            assert key in data
        assert data["miou"] == report.miou
        assert np.mean(list(data["per_class_iou"].values())) == pytest.approx(data["miou"], abs=1e-12)

    def test_class_count_mismatch(self, test_split):
        with pytest.raises(ConfigError):
            evaluate_model(build_model(tiny_cfg(num_classes=4)), test_split)
