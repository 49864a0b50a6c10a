"""
Loader parameter sweeps and training / inference timing
"""
import csv
import logging
import statistics
import time
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from config import config
from src.loader import Loader
from src.models import (
    Batch,
    LoaderConfig,
    SampleRecord,
    SweepResult,
    SweepRow,
    TimingReport,
    TrainConfig,
    WindowSpec,
)
from src.trainer import Trainer
from src.unet import UNet

logger = logging.getLogger(__name__)


def sweep(
    view: Sequence[SampleRecord],
    workers_set: Iterable[int],
    queue_ratio_set: Iterable[int],
    epochs_per_cell: int = 3,
    decode_delay: float = 0.0,
    batch_size: int = config.BATCH_SIZE,
    consumer: Optional[Callable[[Batch], None]] = None,
    root: Optional[Path] = None,
    window: Optional[WindowSpec] = None,
    max_workers: int = config.MAX_WORKERS,
    seed: int = config.SEED,
) -> SweepResult:
    """
    Grid-search workers x queue_ratio; each cell runs one discarded warmup
    epoch then epochs_per_cell timed epochs and reports their median
    """
    workers_set, queue_ratio_set = sorted(set(workers_set)), sorted(set(queue_ratio_set))
    if not workers_set or not queue_ratio_set:
        raise ValueError("sweep grids must not be empty")
    if not view:
        raise ValueError("sweep view is empty")
    if max(workers_set) > max_workers:
        raise ValueError(f"{max(workers_set)} workers exceeds the cap of {max_workers}")
    if epochs_per_cell < 1:
        raise ValueError("epochs_per_cell must be >= 1")

    result = SweepResult()
    for workers in workers_set:
        for ratio in queue_ratio_set:
            cfg = LoaderConfig(batch_size=batch_size, workers=workers, queue_ratio=ratio, shuffle_seed=seed)
            loader = Loader(view, cfg, root=root, window=window, decode_delay=decode_delay)
            delivered = 0
            for epoch in range(epochs_per_cell + 1):
                for batch in loader.iter_epoch(epoch):
                    if epoch > 0:
                        delivered += len(batch)
                    if consumer is not None:
                        consumer(batch)
            timed = loader.history[1:]
            row = SweepRow(
                workers=workers,
                queue_ratio=ratio,
                epoch_seconds=statistics.median(s.epoch_seconds for s in timed),
                samples_per_second=statistics.median(s.samples_per_second for s in timed),
                mean_wait_seconds=float(np.mean([s.mean_wait_seconds for s in timed])),
                delivered=delivered,
            )
            result.rows.append(row)
            logger.info("sweep workers=%d queue_ratio=%d: %.3fs/epoch, %.1f samples/s",
                        workers, ratio, row.epoch_seconds, row.samples_per_second)
    best = result.best
    logger.info("best cell: workers=%d queue_ratio=%d (%.3fs/epoch)", best.workers, best.queue_ratio, best.epoch_seconds)
    return result


def time_training(
    model: UNet,
    view: Sequence[SampleRecord],
    cfg: TrainConfig,
    epochs: int = 1,
    loader_cfg: Optional[LoaderConfig] = None,
    val_view: Optional[Sequence[SampleRecord]] = None,
    root: Optional[Path] = None,
    window: Optional[WindowSpec] = None,
) -> TimingReport:
    """Mean seconds per training epoch, train-only and (with val_view) train+val"""
    trainer = Trainer(model, cfg, loader_cfg, root=root, window=window)
    loader = Loader(view, trainer.train_loader_cfg, root=root, window=window, dtype=model.dtype)
    train_times: List[float] = []
    total_times: List[float] = []
    for epoch in range(epochs):
        started = time.perf_counter()
        trainer.train_epoch(loader, epoch)
        train_times.append(time.perf_counter() - started)
        if val_view:
            trainer.evaluate_loss(val_view)
            total_times.append(time.perf_counter() - started)
    return TimingReport(
        batch_size=cfg.batch_size,
        workers=trainer.train_loader_cfg.workers,
        samples=len(view),
        train_seconds_per_epoch=float(np.mean(train_times)),
        train_val_seconds_per_epoch=float(np.mean(total_times)) if total_times else None,
    )


def time_inference(
    model: UNet,
    view: Sequence[SampleRecord],
    batch_size: int = 1,
    repeats: int = 1,
    root: Optional[Path] = None,
    window: Optional[WindowSpec] = None,
) -> TimingReport:
    """Mean forward seconds per image; decoding is excluded"""
    cfg = LoaderConfig(batch_size=batch_size, workers=1, shuffle=False)
    batches = list(Loader(view, cfg, root=root, window=window, dtype=model.dtype).iter_epoch(0))
    elapsed = 0.0
    for _ in range(repeats):
        for batch in batches:
            started = time.perf_counter()
            model.forward(batch.images)
            elapsed += time.perf_counter() - started
    return TimingReport(
        batch_size=batch_size,
        workers=1,
        samples=len(view),
        inference_seconds_per_image=max(elapsed, 1e-12) / (len(view) * repeats),
    )


def write_sweep_csv(result: SweepResult, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["workers", "queue_ratio", "epoch_seconds", "samples_per_second", "mean_wait_seconds", "delivered", "best"])
        best = result.best
        for r in result.rows:
            writer.writerow([r.workers, r.queue_ratio, f"{r.epoch_seconds:.6f}", f"{r.samples_per_second:.3f}",
                             f"{r.mean_wait_seconds:.6f}", r.delivered, int(r is best)])


def write_plot_data(result: SweepResult, path: Path):
    """One block per queue ratio: 'x y' lines of workers vs epoch seconds"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for ratio in sorted({r.queue_ratio for r in result.rows}):
        lines.append(f"# queue_ratio={ratio}")
        for r in sorted((r for r in result.rows if r.queue_ratio == ratio), key=lambda r: r.workers):
            lines.append(f"{r.workers} {r.epoch_seconds:.6f}")
        lines.append("")
    path.write_text("\n".join(lines))


def write_timing_csv(reports: Sequence[TimingReport], path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(TimingReport.model_fields)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in reports:
            writer.writerow({k: ("" if v is None else v) for k, v in r.model_dump().items()})
