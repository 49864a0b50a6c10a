import json
import math

import numpy as np
import pytest
from skimage.draw import disk

from src.manifest import (
    ManifestError,
    build_manifest,
    diameter_bin,
    equivalent_diameters,
    load_manifest,
    nodule_stats,
    save_manifest,
    split_by_patient,
    split_summary,
    training_view,
)
from src.models import Manifest, SampleRecord, Split
from tests.conftest import write_png


def synthetic_manifest(patients: int, per_patient: int = 1) -> Manifest:
    samples = [
        SampleRecord(image_path=f"p{p:04d}/s{s}.png", patient_id=f"p{p:04d}")
        for p in range(patients) for s in range(per_patient)
    ]
    return Manifest(name="synthetic", root="/data", samples=samples)


def patient_counts(m: Manifest):
    counts = {}
    for split in (Split.TRAINING, Split.VALIDATION, Split.TEST):
        counts[split] = len({s.patient_id for s in m.split_samples(split)})
    return counts[Split.TRAINING], counts[Split.VALIDATION], counts[Split.TEST]


class TestBuildManifest:
    def test_fixture_tree(self, tiny_tree):
        m = build_manifest(tiny_tree)
        assert len(m.samples) == 6
        assert sum(s.has_nodule for s in m.samples) == 2
        assert [s.image_path for s in m.samples] == sorted(s.image_path for s in m.samples)
        assert set(m.patients) == {"p1", "p2"}
        empty = next(s for s in m.samples if s.image_path == "p2/s2.png")
        assert empty.mask_path == "p2/s2_mask.png" and not empty.has_nodule

    def test_empty_root(self, tmp_path):
        with pytest.raises(ManifestError, match="no samples found"):
            build_manifest(tmp_path)

    def test_orphan_mask(self, tiny_tree):
        write_png(tiny_tree / "p1" / "s9_mask.png", np.zeros((8, 8)))
        with pytest.raises(ManifestError, match="p1/s9_mask.png"):
            build_manifest(tiny_tree)

    def test_unreadable_mask(self, tiny_tree):
        (tiny_tree / "p1" / "s1_mask.png").write_bytes(b"not a png")
        with pytest.raises(ManifestError, match="unreadable mask"):
            build_manifest(tiny_tree)

    def test_dicom_spacing_and_sex(self, circles_manifest):
        assert all(s.pixel_spacing == (0.7, 0.7) for s in circles_manifest.samples)
        assert set(circles_manifest.patient_metadata) == set(circles_manifest.patients)
        assert all(meta["sex"] in ("F", "M") for meta in circles_manifest.patient_metadata.values())


class TestSplit:
    def test_623_patients(self):
        m = split_by_patient(synthetic_manifest(623), (0.8, 0.1, 0.1), seed=0)
        assert patient_counts(m) == (498, 62, 63)

    def test_ten_patients(self):
        assert patient_counts(split_by_patient(synthetic_manifest(10), seed=3)) == (8, 1, 1)

    def test_deterministic(self):
        m = synthetic_manifest(50, per_patient=3)
        a = split_by_patient(m, seed=11)
        b = split_by_patient(m, seed=11)
        assert [s.split for s in a.samples] == [s.split for s in b.samples]

    def test_patient_exclusivity_over_seeds(self):
        m = synthetic_manifest(40, per_patient=3)
        for seed in range(100):
            split = split_by_patient(m, seed=seed)
            for indices in split.patients.values():
                assert len({split.samples[i].split for i in indices}) == 1
            assert all(s.split != Split.UNASSIGNED for s in split.samples)

    def test_too_few_patients(self):
        with pytest.raises(ValueError, match="at least 3 patients"):
            split_by_patient(synthetic_manifest(2))

    def test_bad_ratios(self):
        with pytest.raises(ValueError, match="sum to 1"):
            split_by_patient(synthetic_manifest(10), (0.5, 0.2, 0.2))

    def test_mixed_split_patient_rejected(self):
        with pytest.raises(ValueError, match="spans splits"):
            Manifest(name="x", root="/", samples=[
                SampleRecord(image_path="a/1.png", patient_id="a", split=Split.TRAINING),
                SampleRecord(image_path="a/2.png", patient_id="a", split=Split.TEST),
            ])


class TestNoduleStats:
    def test_single_pixel_diameter(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[2, 2] = 1
        (d,) = equivalent_diameters(mask, (1.0, 1.0))
        assert d == pytest.approx(2 / math.sqrt(math.pi))
        assert diameter_bin(d) == "<3mm"

    def test_empty_mask(self):
        assert equivalent_diameters(np.zeros((5, 5)), (1.0, 1.0)) == []

    def test_diagonal_pixels_are_one_component(self):
        mask = np.eye(4, dtype=np.uint8)
        assert len(equivalent_diameters(mask, (1.0, 1.0))) == 1

    @pytest.mark.parametrize("d,expected", [(2.9, "<3mm"), (3.0, "3-10mm"), (10.0, "10-30mm"), (30.0, "10-30mm"), (30.1, ">30mm")])
    def test_bins(self, d, expected):
        assert diameter_bin(d) == expected

    def test_per_split_counts(self, tmp_path):
        big = np.zeros((64, 64))
        rr, cc = disk((32, 32), 20, shape=big.shape)
        big[rr, cc] = 255
        dot = np.zeros((64, 64))
        dot[5, 5] = 255
        write_png(tmp_path / "a" / "s0_mask.png", big)
        write_png(tmp_path / "b" / "s0_mask.png", dot)
        samples = [
            SampleRecord(image_path="a/s0.png", mask_path="a/s0_mask.png", patient_id="a", has_nodule=True,
                         split=Split.TRAINING, pixel_spacing=(1.0, 1.0)),
            SampleRecord(image_path="a/s1.png", patient_id="a", split=Split.TRAINING),
            SampleRecord(image_path="b/s0.png", mask_path="b/s0_mask.png", patient_id="b", has_nodule=True,
                         split=Split.TEST, pixel_spacing=(1.0, 1.0)),
        ]
        stats = nodule_stats(Manifest(name="x", root=str(tmp_path), samples=samples))
        assert stats.bins["training"][">30mm"] == 1
        assert stats.bins["test"]["<3mm"] == 1
        assert stats.totals == {"training": 1, "test": 1}
        assert stats.grand_total == 2
        reordered = nodule_stats(Manifest(name="x", root=str(tmp_path), samples=samples[::-1]))
        assert reordered.totals == stats.totals

    def test_missing_spacing(self, tmp_path):
        write_png(tmp_path / "a" / "s0_mask.png", np.full((4, 4), 255))
        m = Manifest(name="x", root=str(tmp_path), samples=[
            SampleRecord(image_path="a/s0.png", mask_path="a/s0_mask.png", patient_id="a", has_nodule=True),
        ])
        with pytest.raises(ManifestError, match="a/s0.png"):
            nodule_stats(m)

    def test_split_summary(self, circles_manifest):
        summary = split_summary(circles_manifest)
        assert summary["training"].patients == 8
        assert summary["validation"].patients == 1
        assert summary["test"].patients == 1
        assert sum(p.images for p in summary.values()) == 40


def view_manifest(nodules: int = 5, clean: int = 100) -> Manifest:
    samples = [SampleRecord(image_path=f"n/{i:03d}.png", mask_path=f"n/{i:03d}_mask.png", patient_id="n",
                            has_nodule=True, split=Split.TRAINING) for i in range(nodules)]
    samples += [SampleRecord(image_path=f"c/{i:03d}.png", patient_id="c", split=Split.TRAINING) for i in range(clean)]
    samples += [SampleRecord(image_path="v/000.png", patient_id="v", split=Split.VALIDATION)]
    return Manifest(name="views", root="/data", samples=samples)


class TestTrainingView:
    def test_nodules_only(self):
        view = training_view(view_manifest(), Split.TRAINING, 0.0)
        assert len(view) == 5 and all(s.has_nodule for s in view)

    def test_two_percent_black_masks(self):
        view = training_view(view_manifest(), Split.TRAINING, 0.02, seed=4)
        black = [s for s in view if not s.has_nodule]
        assert len(black) == 2
        assert all(s.mask_path is None for s in black)

    def test_any_positive_fraction_adds_one(self):
        view = training_view(view_manifest(clean=10), Split.TRAINING, 0.001)
        assert sum(not s.has_nodule for s in view) == 1

    def test_deterministic_and_monotone(self):
        m = view_manifest()
        a = training_view(m, Split.TRAINING, 0.1, seed=9)
        assert a == training_view(m, Split.TRAINING, 0.1, seed=9)
        base = training_view(m, Split.TRAINING, 0.0, seed=9)
        assert set(s.image_path for s in base) <= set(s.image_path for s in a)

    def test_split_without_nodules(self):
        with pytest.raises(ValueError, match="no nodule-bearing samples"):
            training_view(view_manifest(), Split.VALIDATION, 0.02)

    def test_fraction_range(self):
        with pytest.raises(ValueError):
            training_view(view_manifest(), Split.TRAINING, 1.5)


class TestManifestFile:
    def test_save_load(self, tmp_path, circles_manifest):
        path = tmp_path / "manifest.json"
        save_manifest(circles_manifest, path)
        loaded = load_manifest(path)
        assert loaded == circles_manifest
        save_manifest(loaded, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_document_keys(self, tmp_path, tiny_tree):
        m = split_by_patient(Manifest(name="t", root=str(tiny_tree), samples=[
            SampleRecord(image_path=f"p{i}/s.png", patient_id=f"p{i}") for i in range(5)
        ]), seed=1)
        save_manifest(m, tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        assert {"name", "images", "split"} <= set(doc)
        assert doc["images"][0]["location"] == "p0/s.png"
        indices = sorted(i for lst in doc["split"].values() for i in lst)
        assert indices == list(range(5))
