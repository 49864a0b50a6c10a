import json

import numpy as np
import pytest

from src.metrics import (
    GREEN,
    RED,
    YELLOW,
    binarize,
    confusion_counts,
    dice_score,
    evaluate,
    iou_score,
    overlay,
    write_report,
)
from src.models import LoaderConfig, Split, WindowSpec


class ThresholdOracle:
    """Predicts foreground wherever the windowed slice is brighter than 0.6"""

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return (batch > 0.6).astype(batch.dtype)


def brute_force(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        tp += bool(p and g)
        fp += bool(p and not g)
        fn += bool(g and not p)
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


class TestScores:
    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            density = rng.random()
            pred = (rng.random((16, 16)) < density).astype(np.uint8)
            gt = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
            dice, iou = brute_force(pred, gt)
            assert dice_score(pred, gt) == pytest.approx(dice, abs=1e-12)
            assert iou_score(pred, gt) == pytest.approx(iou, abs=1e-12)

    def test_iou_dice_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            pred = rng.random((16, 16)) < 0.3
            gt = rng.random((16, 16)) < 0.3
            d = dice_score(pred, gt)
            assert abs(iou_score(pred, gt) - d / (2 - d)) < 1e-12

    def test_empty_pair_is_perfect(self):
        empty = np.zeros((4, 4))
        assert dice_score(empty, empty) == 1.0
        assert iou_score(empty, empty) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice_score(a, b) == 0.0

    def test_counts_add_up(self):
        rng = np.random.default_rng(2)
        c = confusion_counts(rng.random((7, 9)) < 0.5, rng.random((7, 9)) < 0.5)
        assert c.total == 63

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ in shape"):
            dice_score(np.zeros((2, 2)), np.zeros((3, 3)))


class TestBinarize:
    def test_threshold_is_inclusive(self):
        np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.51])), [0, 1, 1])

    def test_range(self):
        with pytest.raises(ValueError):
            binarize(np.zeros(3), 1.5)


class TestOverlay:
    def test_colors_match_confusion_counts(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pred = rng.random((12, 12)) < 0.4
            gt = rng.random((12, 12)) < 0.4
            base = np.full((12, 12), 128, dtype=np.uint8)
            rgb = overlay(pred, gt, base)
            c = confusion_counts(pred, gt)
            assert np.all(rgb == YELLOW, axis=-1).sum() == c.tp
            assert np.all(rgb == RED, axis=-1).sum() == c.fn
            assert np.all(rgb == GREEN, axis=-1).sum() == c.fp
            assert np.all(rgb == 128, axis=-1).sum() == c.tn

    def test_shapes_checked(self):
        with pytest.raises(ValueError, match="shapes differ"):
            overlay(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 3)))


class TestEvaluate:
    def test_oracle_scores_perfectly(self, circles_manifest):
        view = circles_manifest.split_samples(Split.TEST)
        report = evaluate(ThresholdOracle(), view, LoaderConfig(batch_size=3, workers=2),
                          root=circles_manifest.root, window=WindowSpec(center=-500, width=1600))
        assert len(report.images) == len(view)
        assert report.mean_dice == 1.0
        assert report.mean_iou == 1.0
        assert report.with_nodule + report.without_nodule == len(view)

    def test_empty_view(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate(ThresholdOracle(), [])

    def test_write_report(self, tmp_path, circles_manifest):
        view = circles_manifest.split_samples(Split.VALIDATION)
        report = evaluate(ThresholdOracle(), view, root=circles_manifest.root)
        summary = write_report(report, tmp_path)
        on_disk = json.loads((tmp_path / "summary.json").read_text())
        assert on_disk == summary
        assert on_disk["reference_dice"] == 0.75
        assert on_disk["reference_iou"] == 0.73
        assert on_disk["images"] == len(view)
        rows = (tmp_path / "per_image.csv").read_text().splitlines()
        assert rows[0].startswith("sample_id,has_nodule,dice,iou")
        assert len(rows) == len(view) + 1
