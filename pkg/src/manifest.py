"""
Dataset catalog: image/mask discovery, patient-exclusive splits, nodule
statistics and training views
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from skimage import measure

from config import config
from src.ct_ingest import DicomParseError, parse_dicom, read_metadata
from src.models import (
    NODULE_BINS,
    Manifest,
    NoduleStats,
    SampleRecord,
    Split,
    SplitPopulation,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".dcm", ".png")
SPLIT_ORDER = (Split.TRAINING, Split.VALIDATION, Split.TEST)


class ManifestError(ValueError):
    """Inconsistent or unreadable dataset tree"""


def read_mask(path: Path) -> np.ndarray:
    """8-bit mask PNG -> uint8 {0, 1}; any nonzero pixel is foreground"""
    try:
        with Image.open(path) as im:
            return (np.asarray(im.convert("L")) > 0).astype(np.uint8)
    except (OSError, ValueError) as e:
        raise ManifestError(f"unreadable mask {path}: {e}") from e


def _image_stem(path: Path) -> str:
    return path.name[: -len(path.suffix)]


def build_manifest(root: Path, name: Optional[str] = None, mask_suffix: str = config.MASK_SUFFIX) -> Manifest:
    """
    Catalog root/<patient>/<slice>.{dcm,png} with masks <slice><mask_suffix>

    Samples are ordered lexicographically by path. Pixel spacing comes from the
    DICOM header, or from the ingest sidecar for PNG slices.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"root directory not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.is_file())
    masks = {p for p in files if p.name.endswith(mask_suffix)}
    images = [p for p in files if p not in masks and p.suffix.lower() in IMAGE_SUFFIXES]
    if not images:
        raise ManifestError("no samples found")

    by_mask_key = {p.parent / p.name[: -len(mask_suffix)]: p for p in masks}
    image_keys = {p.parent / _image_stem(p) for p in images}
    orphans = sorted(m for key, m in by_mask_key.items() if key not in image_keys)
    if orphans:
        raise ManifestError(f"mask without matching image: {orphans[0].relative_to(root).as_posix()}")

    sidecar = read_metadata(root)
    samples: List[SampleRecord] = []
    patient_metadata: Dict[str, Dict[str, str]] = {}
    for image in images:
        rel = image.relative_to(root)
        if len(rel.parts) < 2:
            raise ManifestError(f"{rel.as_posix()}: images must live in per-patient subdirectories")
        patient_id = rel.parts[0]
        mask = by_mask_key.get(image.parent / _image_stem(image))
        has_nodule = bool(mask is not None and read_mask(mask).any())

        spacing = None
        if image.suffix.lower() == ".dcm":
            try:
                raw = parse_dicom(image.read_bytes())
            except DicomParseError as e:
                raise ManifestError(f"{rel.as_posix()}: {e}") from e
            spacing = raw.pixel_spacing
            if raw.patient_sex:
                patient_metadata.setdefault(patient_id, {})["sex"] = raw.patient_sex
        elif rel.as_posix() in sidecar:
            meta = sidecar[rel.as_posix()]
            spacing = meta.pixel_spacing
            if meta.patient_sex:
                patient_metadata.setdefault(patient_id, {})["sex"] = meta.patient_sex

        samples.append(SampleRecord(
            image_path=rel.as_posix(),
            mask_path=mask.relative_to(root).as_posix() if mask is not None else None,
            patient_id=patient_id,
            has_nodule=has_nodule,
            pixel_spacing=spacing,
        ))

    manifest = Manifest(name=name or root.name, root=str(root), samples=samples,
                        patient_metadata=patient_metadata)
    logger.info("Manifest %s: %d samples, %d patients, %d with nodules",
                manifest.name, len(samples), len(manifest.patients),
                sum(s.has_nodule for s in samples))
    return manifest


def split_by_patient(m: Manifest, ratios: Sequence[float] = config.SPLIT_RATIOS, seed: int = config.SPLIT_SEED) -> Manifest:
    """
    Shuffle patients with a seeded generator, then give floor(P*r_train) to
    training, floor(P*r_val) to validation and the remainder to test
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive fractions, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    patients = sorted(m.patients)
    if len(patients) < len(SPLIT_ORDER):
        raise ValueError(f"need at least {len(SPLIT_ORDER)} patients to split, found {len(patients)}")

    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    n_train = math.floor(len(patients) * ratios[0] + 1e-9)
    n_val = math.floor(len(patients) * ratios[1] + 1e-9)
    assignment: Dict[str, Split] = {}
    for k, patient in enumerate(shuffled):
        if k < n_train:
            assignment[patient] = Split.TRAINING
        elif k < n_train + n_val:
            assignment[patient] = Split.VALIDATION
        else:
            assignment[patient] = Split.TEST

    samples = [s.model_copy(update={"split": assignment[s.patient_id]}) for s in m.samples]
    logger.info("Split %d patients into %d / %d / %d (seed=%d)", len(patients),
                n_train, n_val, len(patients) - n_train - n_val, seed)
    return Manifest(name=m.name, root=m.root, samples=samples, patient_metadata=m.patient_metadata)


def diameter_bin(d_mm: float) -> str:
    if d_mm < 3.0:
        return NODULE_BINS[0]
    if d_mm < 10.0:
        return NODULE_BINS[1]
    if d_mm <= 30.0:
        return NODULE_BINS[2]
    return NODULE_BINS[3]


def equivalent_diameters(mask: np.ndarray, spacing: Tuple[float, float]) -> List[float]:
    """Equivalent-circle diameter (mm) of every 8-connected foreground component"""
    labels = measure.label(mask > 0, connectivity=2)
    pixel_area = spacing[0] * spacing[1]
    return [2.0 * math.sqrt(region.area * pixel_area / math.pi) for region in measure.regionprops(labels)]


def nodule_stats(m: Manifest) -> NoduleStats:
    """Bin every connected mask component of every slice by equivalent diameter, per split"""
    bins: Dict[str, Dict[str, int]] = {}
    root = Path(m.root)
    for record in m.samples:
        counts = bins.setdefault(record.split.value, {b: 0 for b in NODULE_BINS})
        if not record.has_nodule:
            continue
        if record.pixel_spacing is None:
            raise ManifestError(f"{record.image_path}: pixel spacing metadata missing")
        for d in equivalent_diameters(read_mask(root / record.mask_path), record.pixel_spacing):
            counts[diameter_bin(d)] += 1
    return NoduleStats(bins=bins)


def split_summary(m: Manifest) -> Dict[str, SplitPopulation]:
    """Patients, images and nodule-bearing images per split"""
    summary: Dict[str, SplitPopulation] = {}
    patients: Dict[str, set] = {}
    for record in m.samples:
        pop = summary.setdefault(record.split.value, SplitPopulation())
        pop.images += 1
        pop.nodule_images += int(record.has_nodule)
        patients.setdefault(record.split.value, set()).add(record.patient_id)
    for split, ids in patients.items():
        summary[split].patients = len(ids)
    return summary


def training_view(m: Manifest, split: Split, black_frac: float = 0.0, seed: int = config.SEED) -> List[SampleRecord]:
    """
    All nodule-bearing samples of a split, then ceil(black_frac * pool) nodule-free
    samples drawn without replacement, each carrying an all-zero mask
    """
    if not 0.0 <= black_frac <= 1.0:
        raise ValueError(f"black_frac must lie in [0, 1], got {black_frac}")
    split = Split(split)
    members = m.split_samples(split)
    nodules = [s for s in members if s.has_nodule]
    if not nodules:
        raise ValueError(f"split {split.value} has no nodule-bearing samples")
    pool = [i for i, s in enumerate(members) if not s.has_nodule]
    k = min(len(pool), math.ceil(black_frac * len(pool) - 1e-9)) if black_frac > 0 else 0
    chosen = []
    if k:
        picks = np.random.default_rng(seed).choice(len(pool), size=k, replace=False)
        chosen = [members[pool[i]].model_copy(update={"mask_path": None}) for i in sorted(picks)]
    return nodules + chosen


def save_manifest(m: Manifest, path: Path):
    """Write the manifest as JSON with name / images / split keys; indices are zero-based"""
    split_lists = {s.value: [] for s in SPLIT_ORDER}
    images = []
    for i, record in enumerate(m.samples):
        images.append({
            "location": record.image_path,
            "label": record.mask_path,
            "patient_id": record.patient_id,
            "has_nodule": record.has_nodule,
            "pixel_spacing": list(record.pixel_spacing) if record.pixel_spacing else None,
        })
        if record.split != Split.UNASSIGNED:
            split_lists[record.split.value].append(i)
    doc = {
        "name": m.name,
        "root": m.root,
        "images": images,
        "split": split_lists,
        "patient_metadata": m.patient_metadata,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: Path) -> Manifest:
    """Read a manifest written by save_manifest"""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    split_of: Dict[int, Split] = {}
    for split_name, indices in doc.get("split", {}).items():
        for i in indices:
            split_of[int(i)] = Split(split_name)
    samples = []
    for i, item in enumerate(doc["images"]):
        spacing = item.get("pixel_spacing")
        samples.append(SampleRecord(
            image_path=item["location"],
            mask_path=item.get("label"),
            patient_id=item["patient_id"],
            has_nodule=item.get("has_nodule", False),
            split=split_of.get(i, Split.UNASSIGNED),
            pixel_spacing=tuple(spacing) if spacing else None,
        ))
    return Manifest(name=doc["name"], root=doc["root"], samples=samples,
                    patient_metadata=doc.get("patient_metadata", {}))
