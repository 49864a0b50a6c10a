"""
Soft-Dice training, best-on-validation checkpointing and black-mask finetuning
"""
import csv
import json
import logging
import math
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.loader import Loader
from src.manifest import training_view
from src.models import (
    AugmentPolicy,
    EpochRecord,
    LoaderConfig,
    Manifest,
    SampleRecord,
    Split,
    TrainConfig,
    TrainHistory,
    WindowSpec,
)
from src.tensor_ops import adam_step
from src.unet import UNet, load_checkpoint

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.ckpt"
FINETUNED_CHECKPOINT = "finetuned.ckpt"
TRAIN_LOG = "train_log.jsonl"
TRAIN_HISTORY = "history.csv"
FINETUNE_LOG = "finetune_log.jsonl"
FINETUNE_HISTORY = "finetune_history.csv"


class TrainingError(RuntimeError):
    """Training diverged or cannot proceed"""


def _check_dice_inputs(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ in shape")
    if pred.size and (pred.min() < 0 or pred.max() > 1):
        raise ValueError("pred must lie in [0, 1]")


def dice_loss_per_sample(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    """L_i = 1 - (2 sum(p g) + s) / (sum p + sum g + s) for every sample i"""
    _check_dice_inputs(pred, target)
    n = pred.shape[0]
    p = pred.reshape(n, -1).astype(np.float64)
    g = target.reshape(n, -1).astype(np.float64)
    numerator = 2.0 * (p * g).sum(axis=1) + smooth
    denominator = p.sum(axis=1) + g.sum(axis=1) + smooth
    return 1.0 - numerator / denominator


def dice_loss(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> Tuple[float, np.ndarray]:
    """Batch-mean soft Dice loss and its gradient w.r.t. pred"""
    _check_dice_inputs(pred, target)
    n = pred.shape[0]
    p = pred.reshape(n, -1).astype(np.float64)
    g = target.reshape(n, -1).astype(np.float64)
    numerator = 2.0 * (p * g).sum(axis=1, keepdims=True) + smooth
    denominator = p.sum(axis=1, keepdims=True) + g.sum(axis=1, keepdims=True) + smooth
    loss = float(np.mean(1.0 - numerator / denominator))
    grad = -(2.0 * g * denominator - numerator) / (denominator ** 2) / n
    return loss, grad.reshape(pred.shape).astype(pred.dtype, copy=False)


class Trainer:
    """Runs the training protocol for one model"""

    def __init__(
        self,
        model: UNet,
        cfg: TrainConfig,
        loader_cfg: Optional[LoaderConfig] = None,
        root: Optional[Path] = None,
        window: Optional[WindowSpec] = None,
        augment: Optional[AugmentPolicy] = AugmentPolicy(),
    ):
        self.model = model
        self.cfg = cfg
        base = loader_cfg or LoaderConfig()
        self.train_loader_cfg = base.model_copy(update={
            "batch_size": cfg.batch_size, "shuffle_seed": cfg.seed, "augment": augment,
        })
        self.eval_loader_cfg = base.model_copy(update={
            "batch_size": cfg.batch_size, "shuffle": False, "augment": None,
        })
        self.root = root
        self.window = window
        self.checkpoint_dir = Path(cfg.checkpoint_dir)
        self.log_path = self.checkpoint_dir / TRAIN_LOG

    def _loader(self, view: Sequence[SampleRecord], cfg: LoaderConfig) -> Loader:
        return Loader(view, cfg, root=self.root, window=self.window, dtype=self.model.dtype)

    def _log_event(self, event: dict):
        with open(self.log_path, "a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def train_epoch(self, loader: Loader, epoch: int) -> float:
        """One pass of forward / dice loss / backward / Adam over a loader epoch"""
        losses: List[float] = []
        counts: List[int] = []
        for batch_index, batch in enumerate(loader.iter_epoch(epoch)):
            self.model.zero_grad()
            probs, cache = self.model.forward_with_cache(batch.images)
            loss, dprobs = dice_loss(probs, batch.masks, self.cfg.dice_smooth)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            self.model.backward(cache, dprobs)
            for p in self.model.parameters():
                adam_step(p, self.cfg.adam)
            losses.append(loss)
            counts.append(len(batch))
        return float(np.average(losses, weights=counts))

    def evaluate_loss(self, view: Sequence[SampleRecord]) -> float:
        """Mean per-sample dice loss without augmentation"""
        total, count = 0.0, 0
        for batch in self._loader(view, self.eval_loader_cfg).iter_epoch(0):
            probs = self.model.forward(batch.images)
            total += float(dice_loss_per_sample(probs, batch.masks, self.cfg.dice_smooth).sum())
            count += len(batch)
        return total / count

    def train(
        self,
        train_view: Sequence[SampleRecord],
        val_view: Optional[Sequence[SampleRecord]] = None,
        epochs: Optional[int] = None,
        test_view: Optional[Sequence[SampleRecord]] = None,
        checkpoint_name: str = BEST_CHECKPOINT,
        log_name: str = TRAIN_LOG,
        history_name: str = TRAIN_HISTORY,
    ) -> Tuple[Path, TrainHistory]:
        """
        Train for cfg.epochs (or epochs), saving a checkpoint whenever the
        validation loss improves; without a validation view the final model is saved.
        The event log and history of a previous run with the same names are replaced.

        Returns:
            (checkpoint path, TrainHistory)
        """
        if not train_view:
            raise ValueError("training view is empty")
        if val_view is not None and not val_view:
            raise ValueError("validation view is empty")
        epochs = self.cfg.epochs if epochs is None else epochs
        if epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {epochs}")
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.checkpoint_dir / log_name
        self.log_path.write_text("")
        history = TrainHistory()
        loader = self._loader(train_view, self.train_loader_cfg)
        checkpoint = self.checkpoint_dir / checkpoint_name
        best = math.inf
        logger.info("Training %d epochs on %d samples (batch %d, lr %g)",
                    epochs, len(train_view), self.cfg.batch_size, self.cfg.adam.lr)

        for epoch in range(epochs):
            started = time.perf_counter()
            train_loss = self.train_epoch(loader, epoch)
            val_loss = self.evaluate_loss(val_view) if val_view else None
            test_loss = self.evaluate_loss(test_view) if test_view else None
            record = EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                                 test_loss=test_loss, seconds=time.perf_counter() - started)
            history.epochs.append(record)
            self._log_event({"event": "epoch", **record.model_dump()})
            logger.info("epoch %d: train %.5f val %s (%.2fs)", epoch, train_loss,
                        "-" if val_loss is None else f"{val_loss:.5f}", record.seconds)
            if val_loss is not None and val_loss < best:
                best = val_loss
                self.model.save(checkpoint)
                self._log_event({"event": "checkpoint", "epoch": epoch, "val_loss": val_loss,
                                 "path": str(checkpoint)})

        if val_view is None:
            self.model.save(checkpoint)
            self._log_event({"event": "checkpoint", "epoch": epochs - 1, "path": str(checkpoint)})
        write_history_csv(history, self.checkpoint_dir / history_name)
        return checkpoint, history


def finetune(
    checkpoint: Path,
    manifest: Manifest,
    cfg: TrainConfig,
    loader_cfg: Optional[LoaderConfig] = None,
    window: Optional[WindowSpec] = None,
    split: Split = Split.TRAINING,
) -> Path:
    """
    Continue training a checkpoint on nodule slices plus a black-mask fraction

    Adam moments start fresh; the final model is saved.
    """
    if cfg.black_frac <= 0:
        raise ValueError("finetuning needs black_frac > 0")
    members = manifest.split_samples(Split(split))
    if not any(not s.has_nodule for s in members):
        raise TrainingError(f"split {Split(split).value} has no nodule-free samples for black masks")
    model = load_checkpoint(checkpoint)
    view = training_view(manifest, split, cfg.black_frac, cfg.seed)
    logger.info("Finetuning %s on %d samples (%d black masks) for %d epochs",
                checkpoint, len(view), sum(not s.has_nodule for s in view), cfg.finetune_epochs)
    trainer = Trainer(model, cfg, loader_cfg, root=Path(manifest.root), window=window)
    out, _ = trainer.train(view, None, epochs=cfg.finetune_epochs, checkpoint_name=FINETUNED_CHECKPOINT,
                           log_name=FINETUNE_LOG, history_name=FINETUNE_HISTORY)
    return out


def write_history_csv(history: TrainHistory, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "test_loss", "seconds"])
        for r in history.epochs:
            writer.writerow([
                r.epoch,
                f"{r.train_loss:.8f}",
                "" if r.val_loss is None else f"{r.val_loss:.8f}",
                "" if r.test_loss is None else f"{r.test_loss:.8f}",
                f"{r.seconds:.3f}",
            ])
