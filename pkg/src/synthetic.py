"""
Synthetic-circles CT dataset: one bright disk per slice on a lung-density background
"""
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image
from pydicom.dataset import FileDataset, FileMetaDataset
from pydicom.uid import ExplicitVRLittleEndian, generate_uid
from skimage.draw import disk

from config import config

logger = logging.getLogger(__name__)

CT_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.2"
BACKGROUND_HU = -800.0
NODULE_HU = 40.0
NOISE_HU = 20.0
RESCALE_INTERCEPT = -1024.0


def write_ct_slice(
    path: Path,
    hu: np.ndarray,
    patient_id: str,
    series_id: str,
    instance_number: int,
    pixel_spacing: Tuple[float, float] = (0.7, 0.7),
    patient_sex: Optional[str] = None,
    rescale_slope: Optional[float] = 1.0,
    rescale_intercept: Optional[float] = RESCALE_INTERCEPT,
):
    """
    Write an explicit-VR little-endian CT slice with unsigned 16-bit pixels

    Passing None for the slope or intercept omits that element.
    """
    slope = 1.0 if rescale_slope is None else rescale_slope
    intercept = 0.0 if rescale_intercept is None else rescale_intercept
    stored = np.rint((np.asarray(hu, dtype=np.float64) - intercept) / slope)
    stored = np.clip(stored, 0, 65535).astype("<u2")

    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = CT_IMAGE_STORAGE
    meta.MediaStorageSOPInstanceUID = generate_uid(entropy_srcs=[series_id, str(instance_number)])
    meta.TransferSyntaxUID = ExplicitVRLittleEndian

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds = FileDataset(str(path), {}, file_meta=meta, preamble=b"\0" * 128)
    ds.is_little_endian = True
    ds.is_implicit_VR = False
    ds.SOPClassUID = CT_IMAGE_STORAGE
    ds.SOPInstanceUID = meta.MediaStorageSOPInstanceUID
    ds.Modality = "CT"
    ds.PatientID = patient_id
    if patient_sex:
        ds.PatientSex = patient_sex
    ds.SeriesInstanceUID = series_id
    ds.InstanceNumber = instance_number
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME2"
    ds.Rows, ds.Columns = stored.shape
    ds.PixelSpacing = [float(pixel_spacing[0]), float(pixel_spacing[1])]
    ds.BitsAllocated = 16
    ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 0
    if rescale_intercept is not None:
        ds.RescaleIntercept = str(rescale_intercept)
    if rescale_slope is not None:
        ds.RescaleSlope = str(rescale_slope)
    ds.PixelData = stored.tobytes()
    ds.save_as(str(path), write_like_original=False)


def generate_circles(
    out_dir: Path,
    patients: int = 10,
    slices_per_patient: int = 4,
    size: int = 64,
    seed: int = config.SEED,
    empty_fraction: float = 0.25,
    pixel_spacing: Tuple[float, float] = (0.7, 0.7),
    mask_suffix: str = config.MASK_SUFFIX,
) -> List[Path]:
    """
    Write out_dir/<patient>/<slice>.dcm with a <slice><mask_suffix> PNG for every
    slice that carries a disk; nodule-free slices get no mask file

    Returns:
        Written DICOM paths, in generation order
    """
    if patients < 1 or slices_per_patient < 1:
        raise ValueError("need at least one patient and one slice per patient")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if not 0.0 <= empty_fraction < 1.0:
        raise ValueError(f"empty_fraction must lie in [0, 1), got {empty_fraction}")

    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    written: List[Path] = []
    for p in range(patients):
        patient_id = f"patient_{p:04d}"
        series_id = generate_uid(entropy_srcs=[str(seed), patient_id])
        sex = "F" if rng.random() < 0.4 else "M"
        for s in range(slices_per_patient):
            hu = BACKGROUND_HU + NOISE_HU * rng.standard_normal((size, size))
            mask = np.zeros((size, size), dtype=np.uint8)
            if rng.random() >= empty_fraction:
                radius = rng.uniform(size / 16, size / 6)
                margin = int(np.ceil(radius)) + 1
                cy, cx = rng.integers(margin, size - margin, size=2)
                rr, cc = disk((cy, cx), radius, shape=mask.shape)
                mask[rr, cc] = 255
                hu[rr, cc] = NODULE_HU + NOISE_HU * rng.standard_normal(rr.size)

            stem = out_dir / patient_id / f"slice_{s:03d}"
            dcm = stem.with_suffix(".dcm")
            write_ct_slice(dcm, hu, patient_id, series_id, s + 1, pixel_spacing, sex)
            if mask.any():
                Image.fromarray(mask).save(stem.parent / f"{stem.name}{mask_suffix}", format="PNG")
            written.append(dcm)
    logger.info("Generated %d synthetic slices for %d patients under %s", len(written), patients, out_dir)
    return written
