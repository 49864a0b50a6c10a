"""
Run the whole workflow at desk scale on the synthetic-circles dataset:
synth -> manifest -> split -> train -> finetune -> eval
"""
import json
import sys
import time
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli import setup_logging
from src.manifest import build_manifest, save_manifest, split_by_patient, split_summary, training_view
from src.metrics import evaluate, write_report
from src.models import AdamConfig, LoaderConfig, Split, TrainConfig, UNetConfig
from src.synthetic import generate_circles
from src.trainer import Trainer, finetune
from src.unet import UNet, load_checkpoint


def evaluate_split(checkpoint: Path, manifest, split: Split, out_dir: Path):
    """Dice / IoU of a checkpoint over one split"""
    report = evaluate(load_checkpoint(checkpoint), manifest.split_samples(split),
                      LoaderConfig(batch_size=8), root=Path(manifest.root))
    summary = write_report(report, out_dir / split.value)
    print(f"  {split.value:<12} dice {report.mean_dice:.4f}  iou {report.mean_iou:.4f}  ({len(report.images)} images)")
    return summary


def main():
    """Run every stage and save a JSON summary next to the run"""
    run_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent.parent / "desk_run"
    setup_logging("WARNING")
    started = time.perf_counter()

    print(f"{'='*60}")
    print(f"Desk-scale run in {run_dir}")
    print('='*60)

    data_dir = run_dir / "data"
    generate_circles(data_dir, patients=10, slices_per_patient=4, size=64, seed=0)
    manifest = split_by_patient(build_manifest(data_dir), seed=0)
    save_manifest(manifest, run_dir / "manifest.json")
    for split, pop in split_summary(manifest).items():
        print(f"{split:<12} patients {pop.patients:>3}  images {pop.images:>3}  with nodule {pop.nodule_images:>3}")

    cfg = TrainConfig(epochs=50, batch_size=8, adam=AdamConfig(lr=1e-4), checkpoint_dir=str(run_dir / "checkpoints"))
    model = UNet.build(UNetConfig(levels=3, base_channels=8), seed=cfg.seed)
    trainer = Trainer(model, cfg, LoaderConfig(workers=2, queue_ratio=8), root=Path(manifest.root))
    val_view = training_view(manifest, Split.VALIDATION) if any(
        s.has_nodule for s in manifest.split_samples(Split.VALIDATION)) else None
    checkpoint, history = trainer.train(training_view(manifest, Split.TRAINING), val_view)
    print(f"\nTrained {len(history.epochs)} epochs, final train loss {history.epochs[-1].train_loss:.4f}")

    finetuned = finetune(checkpoint, manifest, cfg.model_copy(update={"black_frac": 0.5}))
    print(f"Finetuned checkpoint: {finetuned}\n")

    results = {}
    for name, path in (("trained", checkpoint), ("finetuned", finetuned)):
        print(name)
        results[name] = {split.value: evaluate_split(path, manifest, split, run_dir / "eval" / name)
                         for split in (Split.TRAINING, Split.VALIDATION, Split.TEST)}

    results["seconds"] = time.perf_counter() - started
    results_file = run_dir / "desk_run_summary.json"
    with open(results_file, 'w') as f:
        json.dump(results, f, indent=2)
    print(f"\nResults saved to: {results_file}")


if __name__ == "__main__":
    main()
