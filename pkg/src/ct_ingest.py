"""
CT slice ingestion: DICOM parsing, Hounsfield conversion and lung windowing
"""
import json
import logging
import shutil
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from config import config
from src.models import HuImage, NormImage, RawSlice, SliceMetadata, WindowSpec

logger = logging.getLogger(__name__)

EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"

# VRs whose explicit-VR header carries 2 reserved bytes and a 4-byte length
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}

_UNDEFINED_LENGTH = 0xFFFFFFFF
_ITEM = (0xFFFE, 0xE000)
_ITEM_DELIMITER = (0xFFFE, 0xE00D)
_SEQUENCE_DELIMITER = (0xFFFE, 0xE0DD)

TAG_NAMES: Dict[Tuple[int, int], str] = {
    (0x0002, 0x0010): "TransferSyntaxUID",
    (0x0010, 0x0020): "PatientID",
    (0x0010, 0x0040): "PatientSex",
    (0x0020, 0x000E): "SeriesInstanceUID",
    (0x0020, 0x0013): "InstanceNumber",
    (0x0028, 0x0002): "SamplesPerPixel",
    (0x0028, 0x0004): "PhotometricInterpretation",
    (0x0028, 0x0008): "NumberOfFrames",
    (0x0028, 0x0010): "Rows",
    (0x0028, 0x0011): "Columns",
    (0x0028, 0x0030): "PixelSpacing",
    (0x0028, 0x0100): "BitsAllocated",
    (0x0028, 0x0103): "PixelRepresentation",
    (0x0028, 0x1052): "RescaleIntercept",
    (0x0028, 0x1053): "RescaleSlope",
    (0x7FE0, 0x0010): "PixelData",
}
_WANTED = set(TAG_NAMES)


class DicomParseError(ValueError):
    """Base class for DICOM parsing failures"""


class TruncatedDicomError(DicomParseError):
    """The file ends inside an element"""


class MissingElementError(DicomParseError):
    """A required element is absent"""


class UnsupportedTransferSyntaxError(DicomParseError):
    """Compressed, implicit-VR or big-endian encodings"""


class UnsupportedImageError(DicomParseError):
    """Pixel layouts this reader refuses (MONOCHROME1, color, multi-frame)"""


class IngestError(RuntimeError):
    """Directory-level ingestion failure"""


def _tag_name(tag: Tuple[int, int]) -> str:
    return TAG_NAMES.get(tag, f"({tag[0]:04X},{tag[1]:04X})")


class _Reader:
    """Sequential explicit-VR little-endian element reader"""

    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def _take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedDicomError(f"file truncated inside {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def peek_group(self) -> int:
        if self.pos + 2 > len(self.data):
            raise TruncatedDicomError("file truncated inside element tag")
        return struct.unpack_from("<H", self.data, self.pos)[0]

    def read_tag(self) -> Tuple[int, int]:
        group, element = struct.unpack("<HH", self._take(4, "element tag"))
        return group, element

    def read_element(self) -> Tuple[Tuple[int, int], bytes, Optional[bytes]]:
        """Return (tag, vr, value); value is None for skipped undefined-length sequences"""
        tag = self.read_tag()
        name = _tag_name(tag)
        if tag in (_ITEM, _ITEM_DELIMITER, _SEQUENCE_DELIMITER):
            (length,) = struct.unpack("<I", self._take(4, name))
            return tag, b"", self._take(0 if length == _UNDEFINED_LENGTH else length, name)
        vr = self._take(2, name)
        if vr in _LONG_VRS:
            self._take(2, name)
            (length,) = struct.unpack("<I", self._take(4, name))
        else:
            (length,) = struct.unpack("<H", self._take(2, name))
        if length == _UNDEFINED_LENGTH:
            if tag == (0x7FE0, 0x0010):
                raise UnsupportedTransferSyntaxError("encapsulated (compressed) PixelData is not supported")
            self.skip_undefined_sequence(name)
            return tag, vr, None
        return tag, vr, self._take(length, name)

    def skip_undefined_sequence(self, name: str):
        while True:
            tag = self.read_tag()
            (length,) = struct.unpack("<I", self._take(4, name))
            if tag == _SEQUENCE_DELIMITER:
                return
            if tag != _ITEM:
                raise DicomParseError(f"malformed sequence {name}")
            if length != _UNDEFINED_LENGTH:
                self._take(length, name)
                continue
            # undefined-length item: nested elements until the item delimiter
            while True:
                nested_tag, _, _ = self.read_element()
                if nested_tag == _ITEM_DELIMITER:
                    break


def _text(value: bytes) -> str:
    return value.decode("ascii", errors="replace").strip(" \x00")


def _us(value: bytes) -> int:
    return struct.unpack("<H", value[:2])[0]


def parse_dicom(file_bytes: bytes) -> RawSlice:
    """
    Parse an uncompressed explicit-VR little-endian single-frame CT slice

    Raises:
        TruncatedDicomError, MissingElementError, UnsupportedTransferSyntaxError,
        UnsupportedImageError, DicomParseError
    """
    if len(file_bytes) < 132:
        raise TruncatedDicomError("file truncated inside preamble")
    if file_bytes[128:132] != b"DICM":
        raise DicomParseError("missing DICM prefix; not a DICOM Part 10 file")

    reader = _Reader(file_bytes, 132)
    elements: Dict[Tuple[int, int], bytes] = {}
    syntax_checked = False
    while not reader.at_end():
        if not syntax_checked and reader.peek_group() > 0x0002:
            # the file meta group is done; the dataset body follows the declared syntax
            if (0x0002, 0x0010) not in elements:
                raise MissingElementError("missing TransferSyntaxUID")
            syntax = _text(elements[(0x0002, 0x0010)])
            if syntax != EXPLICIT_VR_LITTLE_ENDIAN:
                raise UnsupportedTransferSyntaxError(
                    f"TransferSyntaxUID {syntax} is not supported (explicit VR little endian only)"
                )
            syntax_checked = True
        tag, _, value = reader.read_element()
        if tag in _WANTED and value is not None:
            elements[tag] = value
        if tag == (0x7FE0, 0x0010):
            break

    if (0x0002, 0x0010) not in elements:
        raise MissingElementError("missing TransferSyntaxUID")
    for tag in ((0x0028, 0x0010), (0x0028, 0x0011), (0x7FE0, 0x0010)):
        if tag not in elements:
            raise MissingElementError(f"missing {_tag_name(tag)}")

    photometric = _text(elements.get((0x0028, 0x0004), b"MONOCHROME2"))
    if photometric == "MONOCHROME1":
        raise UnsupportedImageError("MONOCHROME1 (inverted) PhotometricInterpretation is not supported")
    if (0x0028, 0x0002) in elements and _us(elements[(0x0028, 0x0002)]) != 1:
        raise UnsupportedImageError("only single-sample (grayscale) pixels are supported")
    if (0x0028, 0x0008) in elements and int(_text(elements[(0x0028, 0x0008)]) or 1) > 1:
        raise UnsupportedImageError("multi-frame DICOM is not supported")

    rows = _us(elements[(0x0028, 0x0010)])
    cols = _us(elements[(0x0028, 0x0011)])
    bits = _us(elements.get((0x0028, 0x0100), struct.pack("<H", 16)))
    signed = _us(elements.get((0x0028, 0x0103), struct.pack("<H", 0))) == 1
    if bits == 16:
        dtype = np.dtype("<i2") if signed else np.dtype("<u2")
    elif bits == 8:
        dtype = np.dtype("i1") if signed else np.dtype("u1")
    else:
        raise UnsupportedImageError(f"BitsAllocated {bits} is not supported")

    pixel_bytes = elements[(0x7FE0, 0x0010)]
    needed = rows * cols * dtype.itemsize
    if len(pixel_bytes) < needed:
        raise TruncatedDicomError(f"PixelData holds {len(pixel_bytes)} bytes, expected {needed}")
    stored = np.frombuffer(pixel_bytes[:needed], dtype=dtype).reshape(rows, cols)

    warnings: List[str] = []
    slope, intercept = 1.0, 0.0
    if (0x0028, 0x1053) in elements:
        slope = float(_text(elements[(0x0028, 0x1053)]))
    else:
        warnings.append("RescaleSlope missing, defaulting to 1.0")
    if (0x0028, 0x1052) in elements:
        intercept = float(_text(elements[(0x0028, 0x1052)]))
    else:
        warnings.append("RescaleIntercept missing, defaulting to 0.0")
    for message in warnings:
        logger.warning(message)

    spacing = None
    if (0x0028, 0x0030) in elements:
        parts = _text(elements[(0x0028, 0x0030)]).split("\\")
        if len(parts) != 2:
            raise DicomParseError("PixelSpacing must hold two values")
        spacing = (float(parts[0]), float(parts[1]))

    instance = _text(elements.get((0x0020, 0x0013), b""))
    sex = _text(elements.get((0x0010, 0x0040), b"")) or None
    return RawSlice(
        rows=rows,
        cols=cols,
        stored=stored,
        rescale_slope=slope,
        rescale_intercept=intercept,
        pixel_spacing=spacing,
        patient_id=_text(elements.get((0x0010, 0x0020), b"")),
        series_id=_text(elements.get((0x0020, 0x000E), b"")),
        instance_number=int(instance) if instance else 0,
        patient_sex=sex,
        warnings=warnings,
    )


def to_hounsfield(raw: RawSlice) -> HuImage:
    """hu = stored * slope + intercept"""
    values = raw.stored.astype(np.float64) * raw.rescale_slope + raw.rescale_intercept
    return HuImage(values=values)


def window(img: HuImage, spec: WindowSpec) -> NormImage:
    """Clamp (hu - lo) / width into [0, 1]"""
    values = np.asarray(img.values, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise ValueError(f"non-finite HU value at pixel index {int(bad[0])}")
    out = np.clip((values - spec.lo) / spec.width, 0.0, 1.0)
    return NormImage(values=out)


def quantize8(img: NormImage) -> np.ndarray:
    """Round v*255 half away from zero into uint8"""
    scaled = np.asarray(img.values, dtype=np.float64) * 255.0
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.uint8)


def load_norm_image(path: Path, spec: Optional[WindowSpec] = None) -> np.ndarray:
    """Decode an image file to float values in [0, 1] (DICOM windowed, PNG / 255)"""
    path = Path(path)
    if path.suffix.lower() == ".dcm":
        raw = parse_dicom(path.read_bytes())
        return window(to_hounsfield(raw), spec or WindowSpec()).values
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


class CTIngestor:
    """Convert a tree of DICOM slices into windowed 8-bit PNGs plus sidecar metadata"""

    METADATA_FILE = "metadata.jsonl"

    def __init__(self, spec: Optional[WindowSpec] = None, mask_suffix: str = config.MASK_SUFFIX):
        self.spec = spec or WindowSpec()
        self.mask_suffix = mask_suffix

    def ingest_file(self, dcm_path: Path, png_path: Path) -> RawSlice:
        """Window one DICOM file and write it as PNG"""
        raw = parse_dicom(Path(dcm_path).read_bytes())
        norm = window(to_hounsfield(raw), self.spec)
        png_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantize8(norm)).save(png_path, format="PNG")
        return raw

    def ingest_directory(self, in_dir: Path, out_dir: Path) -> List[SliceMetadata]:
        """
        Ingest every *.dcm under in_dir, mirroring the tree into out_dir

        Masks (files ending with the mask suffix) are copied alongside.
        """
        in_dir, out_dir = Path(in_dir), Path(out_dir)
        if not in_dir.is_dir():
            raise IngestError(f"input directory not found: {in_dir}")
        sources = sorted(in_dir.rglob("*.dcm"))
        if not sources:
            raise IngestError("no samples found")
        logger.info("Ingesting %d DICOM slices from %s (center=%s, width=%s)",
                    len(sources), in_dir, self.spec.center, self.spec.width)

        records: List[SliceMetadata] = []
        for src in sources:
            rel = src.relative_to(in_dir).with_suffix(".png")
            try:
                raw = self.ingest_file(src, out_dir / rel)
            except DicomParseError as e:
                raise IngestError(f"{src}: {e}") from e
            records.append(SliceMetadata(
                image=rel.as_posix(),
                patient_id=raw.patient_id,
                series_id=raw.series_id,
                instance_number=raw.instance_number,
                pixel_spacing=raw.pixel_spacing,
                patient_sex=raw.patient_sex,
            ))

        for mask in sorted(in_dir.rglob(f"*{self.mask_suffix}")):
            target = out_dir / mask.relative_to(in_dir)
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(mask, target)

        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / self.METADATA_FILE, "w") as f:
            for record in records:
                f.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
        logger.info("Wrote %d PNG slices and %s", len(records), self.METADATA_FILE)
        return records


def read_metadata(root: Path) -> Dict[str, SliceMetadata]:
    """Load the sidecar metadata of an ingested tree, keyed by image path"""
    path = Path(root) / CTIngestor.METADATA_FILE
    if not path.exists():
        return {}
    records = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                record = SliceMetadata.model_validate_json(line)
                records[record.image] = record
    return records
