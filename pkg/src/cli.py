"""
Command-line entry point wiring every pipeline stage

Exit codes: 0 ok, 1 runtime failure, 2 usage / configuration error.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from config import config
from src.bench import (
    sweep,
    time_inference,
    time_training,
    write_plot_data,
    write_sweep_csv,
    write_timing_csv,
)
from src.ct_ingest import CTIngestor, load_norm_image, quantize8
from src.gradcheck import run_gradient_suite
from src.manifest import (
    build_manifest,
    load_manifest,
    nodule_stats,
    read_mask,
    save_manifest,
    split_by_patient,
    split_summary,
    training_view,
)
from src.metrics import binarize, evaluate, overlay, save_overlay, write_report
from src.models import AugmentPolicy, NormImage, Split
from src.run_config import ConfigError, RunConfig, build_run_config
from src.synthetic import generate_circles
from src.trainer import Trainer, finetune
from src.unet import UNet, load_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

MANIFEST_FILE = "manifest.json"


def setup_logging(level_name: str = config.LOG_LEVEL):
    logging.basicConfig(
        level=getattr(logging, level_name.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _split(text: str) -> Split:
    try:
        return Split(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown split {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI config file (flags override it)")
    common.add_argument("--out-dir", dest="paths.out_dir", default=None, help="artifact directory (default: runs)")

    window = argparse.ArgumentParser(add_help=False)
    window.add_argument("--window-center", dest="window.center", type=float, default=None,
                        help=f"window center in HU (default: {config.WINDOW_CENTER:g})")
    window.add_argument("--window-width", dest="window.width", type=float, default=None,
                        help=f"window width in HU (default: {config.WINDOW_WIDTH:g})")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--levels", dest="unet.levels", type=int, default=None,
                       help=f"U-Net resolution levels (default: {config.UNET_LEVELS})")
    model.add_argument("--base-channels", dest="unet.base_channels", type=int, default=None,
                       help=f"channels at level 0 (default: {config.UNET_BASE_CHANNELS})")

    loader = argparse.ArgumentParser(add_help=False)
    loader.add_argument("--workers", dest="loader.workers", type=int, default=None,
                        help=f"loader producer threads (default: {config.LOADER_WORKERS})")
    loader.add_argument("--queue-ratio", dest="loader.queue_ratio", type=int, default=None,
                        help=f"queue capacity as a multiple of the batch size (default: {config.QUEUE_RATIO})")
    loader.add_argument("--batch-size", dest="train.batch_size", type=int, default=None,
                        help=f"batch size (default: {config.BATCH_SIZE})")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", dest="train.epochs", type=int, default=None,
                          help=f"training epochs (default: {config.EPOCHS})")
    training.add_argument("--lr", dest="train.lr", type=float, default=None,
                          help=f"Adam learning rate (default: {config.LEARNING_RATE:g})")
    training.add_argument("--seed", dest="train.seed", type=int, default=None,
                          help=f"initialization / shuffle seed (default: {config.SEED})")

    threshold = argparse.ArgumentParser(add_help=False)
    threshold.add_argument("--threshold", dest="eval.threshold", type=float, default=None,
                           help=f"probability threshold (default: {config.THRESHOLD})")
    threshold.add_argument("--split", dest="split_name", type=_split, default=Split.TEST,
                           help="split to evaluate (default: test)")

    parser = argparse.ArgumentParser(prog="nodule-seg", description="Lung nodule CT segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic-circles DICOM dataset")
    p.add_argument("--patients", type=int, default=10, help="patients (default: 10)")
    p.add_argument("--slices", type=int, default=4, help="slices per patient (default: 4)")
    p.add_argument("--size", type=int, default=64, help="slice edge in pixels (default: 64)")
    p.add_argument("--empty-fraction", type=float, default=0.25, help="nodule-free slice fraction (default: 0.25)")
    p.add_argument("--seed", type=int, default=config.SEED, help=f"generator seed (default: {config.SEED})")

    p = sub.add_parser("ingest", parents=[common, window], help="window DICOM slices into PNGs + metadata")
    p.add_argument("in_dir", type=Path)

    p = sub.add_parser("manifest", parents=[common], help="catalog an image/mask tree")
    p.add_argument("root", type=Path)
    p.add_argument("--name", default=None, help="dataset name (default: root directory name)")

    p = sub.add_parser("split", parents=[common], help="assign patient-exclusive splits")
    p.add_argument("manifest", type=Path)
    p.add_argument("--ratios", dest="split.ratios", default=None,
                   help="train,val,test patient fractions (default: 0.8,0.1,0.1)")
    p.add_argument("--seed", dest="split.seed", type=int, default=None,
                   help=f"split seed (default: {config.SPLIT_SEED})")

    p = sub.add_parser("stats", parents=[common], help="nodule diameter bins and split populations")
    p.add_argument("manifest", type=Path)

    p = sub.add_parser("train", parents=[common, window, model, loader, training], help="train a U-Net from scratch")
    p.add_argument("manifest", type=Path)
    p.add_argument("--no-augment", action="store_true", help="disable flips and rotations")
    p.add_argument("--test-loss", action="store_true", help="also record the test split loss every epoch")

    p = sub.add_parser("finetune", parents=[common, window, loader, training], help="finetune with black masks")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--black-frac", dest="train.black_frac", type=float, default=None,
                   help=f"fraction of nodule-free slices added with black masks (default: {config.BLACK_FRAC})")
    p.add_argument("--finetune-epochs", dest="train.finetune_epochs", type=int, default=None,
                   help=f"finetuning epochs (default: {config.FINETUNE_EPOCHS})")

    p = sub.add_parser("eval", parents=[common, window, loader, threshold], help="Dice / IoU over a split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)

    p = sub.add_parser("overlay", parents=[common, window, threshold], help="render confusion overlays")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--limit", type=int, default=None, help="render at most this many slices")

    p = sub.add_parser("bench-sweep", parents=[common, window, loader], help="grid-search loader workers x queue ratio")
    p.add_argument("manifest", type=Path)
    p.add_argument("--workers-set", type=_int_list, default=[1, 2, 4], help="worker counts (default: 1,2,4)")
    p.add_argument("--queue-ratios", type=_int_list, default=[2, 8], help="queue ratios (default: 2,8)")
    p.add_argument("--epochs-per-cell", type=int, default=3, help="timed epochs per cell (default: 3)")
    p.add_argument("--decode-delay", type=float, default=0.0, help="synthetic decode latency in seconds (default: 0)")
    p.add_argument("--bench-split", type=_split, default=Split.TRAINING, help="split to load (default: training)")

    p = sub.add_parser("bench-timing", parents=[common, window, model, loader, training],
                       help="per-epoch training and per-image inference times")
    p.add_argument("manifest", type=Path)
    p.add_argument("--checkpoint", type=Path, default=None, help="time this model instead of a fresh one")
    p.add_argument("--timing-epochs", type=int, default=1, help="epochs to average (default: 1)")

    p = sub.add_parser("gradcheck", parents=[common], help="64-bit finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0, help="random tensor seed (default: 0)")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if "." in k}


def _require(*paths: Path):
    for path in paths:
        if not Path(path).exists():
            raise ConfigError(f"path not found: {path}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, rc: RunConfig) -> int:
    generate_circles(Path(rc.out_dir), patients=args.patients, slices_per_patient=args.slices,
                     size=args.size, seed=args.seed, empty_fraction=args.empty_fraction)
    return EXIT_OK


def cmd_ingest(args, rc: RunConfig) -> int:
    _require(args.in_dir)
    CTIngestor(rc.window).ingest_directory(args.in_dir, Path(rc.out_dir))
    return EXIT_OK


def cmd_manifest(args, rc: RunConfig) -> int:
    _require(args.root)
    m = build_manifest(args.root, args.name)
    save_manifest(m, Path(rc.out_dir) / MANIFEST_FILE)
    return EXIT_OK


def cmd_split(args, rc: RunConfig) -> int:
    _require(args.manifest)
    m = split_by_patient(load_manifest(args.manifest), rc.split_ratios, rc.split_seed)
    save_manifest(m, Path(rc.out_dir) / MANIFEST_FILE)
    return EXIT_OK


def cmd_stats(args, rc: RunConfig) -> int:
    _require(args.manifest)
    m = load_manifest(args.manifest)
    stats = nodule_stats(m)
    population = split_summary(m)
    print(f"{'split':<12}{'patients':>10}{'images':>10}{'nodule':>10}")
    for split, pop in population.items():
        print(f"{split:<12}{pop.patients:>10}{pop.images:>10}{pop.nodule_images:>10}")
    print()
    bins = list(next(iter(stats.bins.values())).keys()) if stats.bins else []
    print(f"{'split':<12}" + "".join(f"{b:>10}" for b in bins) + f"{'total':>10}")
    for split, counts in stats.bins.items():
        print(f"{split:<12}" + "".join(f"{counts[b]:>10}" for b in bins) + f"{stats.totals[split]:>10}")
    print(f"{'all':<12}" + " " * (10 * len(bins)) + f"{stats.grand_total:>10}")

    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "nodules": stats.bins,
        "totals": stats.totals,
        "grand_total": stats.grand_total,
        "population": {k: v.model_dump() for k, v in population.items()},
    }
    (out / "stats.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _view_or_none(m, split: Split):
    try:
        return training_view(m, split, 0.0)
    except ValueError:
        logger.warning("split %s has no nodule-bearing samples; its loss is not tracked", split.value)
        return None


def cmd_train(args, rc: RunConfig) -> int:
    _require(args.manifest)
    m = load_manifest(args.manifest)
    train_cfg = rc.train.model_copy(update={"checkpoint_dir": str(Path(rc.out_dir) / "checkpoints")})
    model = UNet.build(rc.unet, seed=train_cfg.seed)
    trainer = Trainer(model, train_cfg, rc.loader, root=Path(m.root), window=rc.window,
                      augment=None if args.no_augment else AugmentPolicy())
    checkpoint, history = trainer.train(
        training_view(m, Split.TRAINING, 0.0),
        _view_or_none(m, Split.VALIDATION),
        test_view=_view_or_none(m, Split.TEST) if args.test_loss else None,
    )
    logger.info("Training done: %d epochs, best epoch %s, checkpoint %s",
                len(history.epochs), history.best_epoch, checkpoint)
    return EXIT_OK


def cmd_finetune(args, rc: RunConfig) -> int:
    _require(args.checkpoint, args.manifest)
    train_cfg = rc.train.model_copy(update={"checkpoint_dir": str(Path(rc.out_dir) / "checkpoints")})
    finetune(args.checkpoint, load_manifest(args.manifest), train_cfg, rc.loader, window=rc.window)
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    _require(args.checkpoint, args.manifest)
    m = load_manifest(args.manifest)
    view = m.split_samples(args.split_name)
    if not view:
        raise ConfigError(f"split {args.split_name.value} is empty")
    loader_cfg = rc.loader.model_copy(update={"batch_size": rc.train.batch_size})
    report = evaluate(load_checkpoint(args.checkpoint), view, loader_cfg, rc.threshold,
                      root=Path(m.root), window=rc.window)
    summary = write_report(report, Path(rc.out_dir) / "eval")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_overlay(args, rc: RunConfig) -> int:
    _require(args.checkpoint, args.manifest)
    m = load_manifest(args.manifest)
    model = load_checkpoint(args.checkpoint)
    root = Path(m.root)
    view = m.split_samples(args.split_name)[: args.limit]
    out = Path(rc.out_dir) / "overlays"
    for record in view:
        image = load_norm_image(root / record.image_path, rc.window)
        gt = read_mask(root / record.mask_path) if record.mask_path else np.zeros(image.shape, dtype=np.uint8)
        pred = binarize(model.forward(image[None, None].astype(model.dtype)), rc.threshold)[0, 0]
        base = quantize8(NormImage(values=image))
        name = Path(record.image_path).with_suffix("").as_posix().replace("/", "__")
        save_overlay(overlay(pred, gt, base), out / f"{name}.png")
    logger.info("Wrote %d overlays to %s", len(view), out)
    return EXIT_OK


def cmd_bench_sweep(args, rc: RunConfig) -> int:
    _require(args.manifest)
    m = load_manifest(args.manifest)
    view = m.split_samples(args.bench_split)
    result = sweep(view, args.workers_set, args.queue_ratios, args.epochs_per_cell, args.decode_delay,
                   batch_size=rc.train.batch_size, root=Path(m.root), window=rc.window,
                   max_workers=rc.max_workers, seed=rc.train.seed)
    out = Path(rc.out_dir)
    write_sweep_csv(result, out / "sweep.csv")
    write_plot_data(result, out / "sweep_plot.txt")
    return EXIT_OK


def cmd_bench_timing(args, rc: RunConfig) -> int:
    _require(args.manifest)
    m = load_manifest(args.manifest)
    root = Path(m.root)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else UNet.build(rc.unet, seed=rc.train.seed)
    train_cfg = rc.train.model_copy(update={"checkpoint_dir": str(Path(rc.out_dir) / "checkpoints")})
    train_view = training_view(m, Split.TRAINING, 0.0)
    test_view = m.split_samples(Split.TEST) or train_view
    reports = [
        time_training(model, train_view, train_cfg, args.timing_epochs, rc.loader,
                      val_view=_view_or_none(m, Split.VALIDATION), root=root, window=rc.window),
        time_inference(model, test_view, batch_size=1, root=root, window=rc.window),
        time_inference(model, test_view, batch_size=rc.train.batch_size, root=root, window=rc.window),
    ]
    write_timing_csv(reports, Path(rc.out_dir) / "timing.csv")
    return EXIT_OK


def cmd_gradcheck(args, rc: RunConfig) -> int:
    results = run_gradient_suite(seed=args.seed)
    failed = [case.name for case in results if not case.passed]
    if failed:
        logger.error("Gradient check failed for: %s", ", ".join(failed))
        return EXIT_RUNTIME
    logger.info("All %d gradient checks passed", len(results))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "manifest": cmd_manifest,
    "split": cmd_split,
    "stats": cmd_stats,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "overlay": cmd_overlay,
    "bench-sweep": cmd_bench_sweep,
    "bench-timing": cmd_bench_timing,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging(os.getenv("LOGLEVEL", config.LOG_LEVEL))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE

    try:
        config.validate()
        rc = build_run_config(args.config, _overrides(args))
    except (ConfigError, ValidationError, ValueError) as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args, rc)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except Exception as e:
        logger.error("%s failed: %s", args.command, e)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
