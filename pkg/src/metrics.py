"""
Thresholding, Dice / IoU scoring, split evaluation reports and overlays
"""
import csv
import json
import logging
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from config import config
from src.loader import Loader
from src.models import (
    ConfusionCounts,
    ImageScore,
    LoaderConfig,
    MetricsReport,
    SampleRecord,
    WindowSpec,
)

logger = logging.getLogger(__name__)

YELLOW = (255, 255, 0)  # true positive
RED = (255, 0, 0)       # false negative
GREEN = (0, 255, 0)     # false positive


class SegmentationModel(Protocol):
    def forward(self, batch: np.ndarray) -> np.ndarray: ...


def binarize(probs: np.ndarray, threshold: float = config.THRESHOLD) -> np.ndarray:
    """1 where p >= threshold, else 0"""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=p.size - tp - fp - fn)


def dice_from_counts(c: ConfusionCounts) -> float:
    denominator = 2 * c.tp + c.fp + c.fn
    return 1.0 if denominator == 0 else 2 * c.tp / denominator


def iou_from_counts(c: ConfusionCounts) -> float:
    denominator = c.tp + c.fp + c.fn
    return 1.0 if denominator == 0 else c.tp / denominator


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2 tp / (2 tp + fp + fn); two empty masks score 1.0"""
    return dice_from_counts(confusion_counts(pred, gt))


def iou_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """tp / (tp + fp + fn); two empty masks score 1.0"""
    return iou_from_counts(confusion_counts(pred, gt))


def evaluate(
    model: SegmentationModel,
    view: Sequence[SampleRecord],
    loader_cfg: Optional[LoaderConfig] = None,
    threshold: float = config.THRESHOLD,
    root: Optional[Path] = None,
    window: Optional[WindowSpec] = None,
) -> MetricsReport:
    """Per-image Dice / IoU over a view, nodule-free slices included"""
    if not view:
        raise ValueError("evaluation view is empty")
    cfg = (loader_cfg or LoaderConfig()).model_copy(update={"shuffle": False, "augment": None})
    by_id = {s.sample_id: s for s in view}
    report = MetricsReport(threshold=threshold)
    for batch in Loader(view, cfg, root=root, window=window).iter_epoch(0):
        preds = binarize(model.forward(batch.images), threshold)
        for i, sample_id in enumerate(batch.sample_ids):
            counts = confusion_counts(preds[i, 0], batch.masks[i, 0])
            report.images.append(ImageScore(
                sample_id=sample_id,
                dice=dice_from_counts(counts),
                iou=iou_from_counts(counts),
                has_nodule=by_id[sample_id].has_nodule,
                counts=counts,
            ))
    logger.info("Evaluated %d images: mean dice %.4f, mean iou %.4f",
                len(report.images), report.mean_dice, report.mean_iou)
    return report


def write_report(report: MetricsReport, out_dir: Path):
    """Per-image CSV table plus a JSON summary block"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "per_image.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "has_nodule", "dice", "iou", "tp", "fp", "fn", "tn"])
        for s in report.images:
            writer.writerow([s.sample_id, int(s.has_nodule), f"{s.dice:.6f}", f"{s.iou:.6f}",
                             s.counts.tp, s.counts.fp, s.counts.fn, s.counts.tn])
    summary = {
        "reference_dice": report.reference_dice,
        "reference_iou": report.reference_iou,
        "reference_note": "published full-scale test values, not a desk-scale target",
        "threshold": report.threshold,
        "images": len(report.images),
        "with_nodule": report.with_nodule,
        "without_nodule": report.without_nodule,
        "mean_dice": report.mean_dice,
        "mean_iou": report.mean_iou,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def overlay(pred: np.ndarray, gt: np.ndarray, base: np.ndarray) -> np.ndarray:
    """
    Color a grayscale slice by confusion class

    TP yellow, FN red, FP green, TN keeps the base gray value.
    """
    if not (pred.shape == gt.shape == base.shape):
        raise ValueError(f"shapes differ: pred {pred.shape}, gt {gt.shape}, base {base.shape}")
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    rgb = np.repeat(np.asarray(base, dtype=np.uint8)[..., None], 3, axis=2)
    rgb[p & g] = YELLOW
    rgb[~p & g] = RED
    rgb[p & ~g] = GREEN
    return rgb


def save_overlay(rgb: np.ndarray, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path, format="PNG")
