"""
Pydantic data models for every stage of the segmentation pipeline
"""
from enum import Enum
from pathlib import PurePosixPath
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import config


# ---------------------------------------------------------------------------
# ct-ingest
# ---------------------------------------------------------------------------

class WindowSpec(BaseModel):
    """Hounsfield window: [center - width/2, center + width/2] maps onto [0, 1]"""
    center: float = Field(default=config.WINDOW_CENTER, description="Window center (HU)")
    width: float = Field(default=config.WINDOW_WIDTH, gt=0, description="Window width (HU)")

    @property
    def lo(self) -> float:
        return self.center - self.width / 2.0


class RawSlice(BaseModel):
    """A CT slice as stored in the DICOM file"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: int = Field(..., gt=0)
    cols: int = Field(..., gt=0)
    stored: np.ndarray = Field(..., description="Stored pixel values, shape (rows, cols)")
    rescale_slope: float = Field(default=1.0, gt=0, description="HU per stored unit")
    rescale_intercept: float = Field(default=0.0, description="HU offset")
    pixel_spacing: Optional[Tuple[float, float]] = Field(
        default=None, description="(row, column) spacing in mm/px"
    )
    patient_id: str = ""
    series_id: str = ""
    instance_number: int = 0
    patient_sex: Optional[str] = None
    warnings: List[str] = Field(default_factory=list)

    @model_validator(mode='after')
    def check_pixels(self):
        if self.stored.size != self.rows * self.cols:
            raise ValueError(
                f"stored has {self.stored.size} values, expected {self.rows}x{self.cols}"
            )
        if self.stored.shape != (self.rows, self.cols):
            self.stored = self.stored.reshape(self.rows, self.cols)
        if self.pixel_spacing is not None and min(self.pixel_spacing) <= 0:
            raise ValueError(f"pixel_spacing must be positive, got {self.pixel_spacing}")
        return self


class HuImage(BaseModel):
    """A slice in Hounsfield units"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="HU values, shape (rows, cols)")

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])


class NormImage(BaseModel):
    """A windowed slice with every value in [0, 1]"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray

    @field_validator('values')
    @classmethod
    def check_range(cls, v):
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("NormImage values must lie in [0, 1]")
        return v

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])


class SliceMetadata(BaseModel):
    """Sidecar record written next to every exported PNG"""
    image: str = Field(..., description="PNG path relative to the output root")
    patient_id: str
    series_id: str
    instance_number: int
    pixel_spacing: Optional[Tuple[float, float]] = None
    patient_sex: Optional[str] = None


# ---------------------------------------------------------------------------
# dataset-manifest
# ---------------------------------------------------------------------------

class Split(str, Enum):
    TRAINING = "training"
    VALIDATION = "validation"
    TEST = "test"
    UNASSIGNED = "unassigned"


class SampleRecord(BaseModel):
    """One image (and optional mask) of the dataset"""
    model_config = ConfigDict(frozen=True)

    image_path: str = Field(..., description="Image path relative to the manifest root")
    mask_path: Optional[str] = Field(default=None, description="Mask path relative to the root")
    patient_id: str
    has_nodule: bool = False
    split: Split = Split.UNASSIGNED
    pixel_spacing: Optional[Tuple[float, float]] = None

    @model_validator(mode='after')
    def check_mask(self):
        if self.has_nodule and self.mask_path is None:
            raise ValueError(f"{self.image_path}: has_nodule requires a mask")
        return self

    @property
    def sample_id(self) -> str:
        return self.image_path


class Manifest(BaseModel):
    """Dataset catalog with patient-exclusive split assignments"""
    model_config = ConfigDict(frozen=True)

    name: str
    root: str
    samples: List[SampleRecord] = Field(default_factory=list)
    patient_metadata: Dict[str, Dict[str, str]] = Field(default_factory=dict)

    @model_validator(mode='after')
    def check_consistency(self):
        seen = set()
        splits: Dict[str, Split] = {}
        for record in self.samples:
            for path in (record.image_path, record.mask_path):
                if path is None:
                    continue
                p = PurePosixPath(path)
                if p.is_absolute() or '..' in p.parts:
                    raise ValueError(f"path {path!r} does not resolve under the root")
            if record.image_path in seen:
                raise ValueError(f"duplicate image_path {record.image_path!r}")
            seen.add(record.image_path)
            previous = splits.setdefault(record.patient_id, record.split)
            if previous != record.split:
                raise ValueError(
                    f"patient {record.patient_id!r} spans splits {previous.value} and {record.split.value}"
                )
        return self

    @property
    def patients(self) -> Dict[str, List[int]]:
        """patient_id -> sample indices"""
        index: Dict[str, List[int]] = {}
        for i, record in enumerate(self.samples):
            index.setdefault(record.patient_id, []).append(i)
        return index

    def split_samples(self, split: Split) -> List[SampleRecord]:
        return [s for s in self.samples if s.split == split]


NODULE_BINS = ("<3mm", "3-10mm", "10-30mm", ">30mm")


class NoduleStats(BaseModel):
    """Equivalent-diameter nodule counts per split"""
    bins: Dict[str, Dict[str, int]] = Field(default_factory=dict, description="split -> bin -> count")

    @property
    def totals(self) -> Dict[str, int]:
        return {split: sum(counts.values()) for split, counts in self.bins.items()}

    @property
    def grand_total(self) -> int:
        return sum(self.totals.values())


class SplitPopulation(BaseModel):
    """Population of one split"""
    patients: int = 0
    images: int = 0
    nodule_images: int = 0


# ---------------------------------------------------------------------------
# tensor-core / unet
# ---------------------------------------------------------------------------

class AdamConfig(BaseModel):
    """Adam hyperparameters"""
    lr: float = Field(default=config.LEARNING_RATE, ge=0)
    beta1: float = Field(default=config.ADAM_BETA1, ge=0, lt=1)
    beta2: float = Field(default=config.ADAM_BETA2, ge=0, lt=1)
    eps: float = Field(default=config.ADAM_EPS, gt=0)


class GradCheckReport(BaseModel):
    """Result of a central-difference gradient check"""
    max_rel_error: float
    checked: int
    skipped: List[int] = Field(default_factory=list, description="Flat indices skipped at kinks")


class GradCheckCase(BaseModel):
    """One named entry of the gradient suite"""
    name: str
    tolerance: float = Field(..., gt=0)
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.max_rel_error < self.tolerance and self.report.checked > 0


class UNetConfig(BaseModel):
    """U-Net topology"""
    levels: int = Field(default=config.UNET_LEVELS, ge=2, description="Resolution levels")
    base_channels: int = Field(default=config.UNET_BASE_CHANNELS, ge=1)
    in_channels: int = Field(default=1, ge=1)
    out_channels: int = Field(default=1, ge=1)

    def channels(self, level: int) -> int:
        """Feature maps at a resolution level (doubling per level)"""
        return self.base_channels * 2 ** level

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


# ---------------------------------------------------------------------------
# augment / loader
# ---------------------------------------------------------------------------

class AugmentPolicy(BaseModel):
    """Label-consistent flips and quarter-turn rotations"""
    p_hflip: float = Field(default=0.5, ge=0, le=1)
    p_vflip: float = Field(default=0.5, ge=0, le=1)
    rotations: Tuple[int, ...] = Field(default=(0, 90, 180, 270))

    @field_validator('rotations')
    @classmethod
    def check_rotations(cls, v):
        if not v:
            raise ValueError("rotations must not be empty")
        bad = [r for r in v if r not in (0, 90, 180, 270)]
        if bad:
            raise ValueError(f"rotations must be multiples of 90 in [0, 270], got {bad}")
        return tuple(v)


class Transform(BaseModel):
    """One sampled geometric transform"""
    hflip: bool = False
    vflip: bool = False
    rotation: int = 0


class LoaderConfig(BaseModel):
    """Prefetch dataloader tuning surface"""
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    workers: int = Field(default=config.LOADER_WORKERS, ge=1)
    queue_ratio: int = Field(default=config.QUEUE_RATIO, ge=1)
    shuffle_seed: int = config.SEED
    shuffle: bool = True
    augment: Optional[AugmentPolicy] = None

    @property
    def capacity(self) -> int:
        """Queue capacity in samples"""
        return self.queue_ratio * self.batch_size


class Batch(BaseModel):
    """Images and binary masks, (N, 1, H, W)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    masks: np.ndarray
    sample_ids: List[str]

    def __len__(self) -> int:
        return len(self.sample_ids)


class LoaderStats(BaseModel):
    """Throughput report for one completed epoch"""
    epoch: int
    samples: int
    batches: int
    epoch_seconds: float
    samples_per_second: float
    mean_wait_seconds: float = Field(..., description="Mean consumer wait per batch")
    mean_queue_occupancy: float
    max_queue_occupancy: int
    worker_busy_fraction: List[float]


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    """Training protocol parameters"""
    epochs: int = Field(default=config.EPOCHS, ge=1)
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    dice_smooth: float = Field(default=config.DICE_SMOOTH, gt=0)
    seed: int = config.SEED
    checkpoint_dir: str = "checkpoints"
    black_frac: float = Field(default=config.BLACK_FRAC, ge=0, le=1)
    finetune_epochs: int = Field(default=config.FINETUNE_EPOCHS, ge=1)


class EpochRecord(BaseModel):
    """One row of the training history"""
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    test_loss: Optional[float] = None
    seconds: float = 0.0


class TrainHistory(BaseModel):
    """Per-epoch losses and the best-on-validation epoch"""
    epochs: List[EpochRecord] = Field(default_factory=list)

    @property
    def best_epoch(self) -> Optional[int]:
        scored = [r for r in self.epochs if r.val_loss is not None]
        if not scored:
            return None
        return min(scored, key=lambda r: (r.val_loss, r.epoch)).epoch

    @property
    def best_val_loss(self) -> Optional[float]:
        best = self.best_epoch
        if best is None:
            return None
        return next(r.val_loss for r in self.epochs if r.epoch == best)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class ConfusionCounts(BaseModel):
    """Pixel confusion counts for one prediction/ground-truth pair"""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class ImageScore(BaseModel):
    """Per-image evaluation row"""
    sample_id: str
    dice: float = Field(..., ge=0, le=1)
    iou: float = Field(..., ge=0, le=1)
    has_nodule: bool
    counts: ConfusionCounts


class MetricsReport(BaseModel):
    """Split-level Dice/IoU evaluation"""
    threshold: float
    images: List[ImageScore] = Field(default_factory=list)
    reference_dice: float = Field(default=config.REFERENCE_DICE, description="Published full-scale value, reference only")
    reference_iou: float = Field(default=config.REFERENCE_IOU, description="Published full-scale value, reference only")

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice for s in self.images])) if self.images else 0.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.images])) if self.images else 0.0

    @property
    def with_nodule(self) -> int:
        return sum(1 for s in self.images if s.has_nodule)

    @property
    def without_nodule(self) -> int:
        return len(self.images) - self.with_nodule


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

class SweepRow(BaseModel):
    """One (workers, queue_ratio) cell of a loader sweep"""
    workers: int
    queue_ratio: int
    epoch_seconds: float
    samples_per_second: float
    mean_wait_seconds: float
    delivered: int = Field(..., description="Samples delivered over the measured epochs")


class SweepResult(BaseModel):
    """Grid-search table over loader parameters"""
    rows: List[SweepRow] = Field(default_factory=list)

    @property
    def best(self) -> Optional[SweepRow]:
        if not self.rows:
            return None
        return min(self.rows, key=lambda r: r.epoch_seconds)


class TimingReport(BaseModel):
    """Training and inference wall-clock means"""
    batch_size: int
    workers: int
    samples: int
    train_seconds_per_epoch: Optional[float] = Field(default=None, gt=0)
    train_val_seconds_per_epoch: Optional[float] = Field(default=None, gt=0)
    inference_seconds_per_image: Optional[float] = Field(default=None, gt=0)
