import numpy as np
import pytest
from PIL import Image

from src.manifest import build_manifest, split_by_patient
from src.models import Manifest, SampleRecord
from src.synthetic import generate_circles


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")


@pytest.fixture(scope="session")
def circles_root(tmp_path_factory):
    """The bundled synthetic-circles dataset: 10 patients x 4 slices, 64x64"""
    root = tmp_path_factory.mktemp("circles")
    generate_circles(root, patients=10, slices_per_patient=4, size=64, seed=0)
    return root


@pytest.fixture(scope="session")
def circles_manifest(circles_root) -> Manifest:
    return split_by_patient(build_manifest(circles_root), seed=0)


@pytest.fixture
def tiny_tree(tmp_path):
    """2 patients x 3 PNG slices; two masks with foreground, one empty mask"""
    root = tmp_path / "tree"
    for patient in ("p1", "p2"):
        for s in range(3):
            write_png(root / patient / f"s{s}.png", np.full((8, 8), 40 * s + 10))
    fg = np.zeros((8, 8))
    fg[2:4, 2:4] = 255
    write_png(root / "p1" / "s0_mask.png", fg)
    write_png(root / "p2" / "s1_mask.png", fg)
    write_png(root / "p2" / "s2_mask.png", np.zeros((8, 8)))
    return root


@pytest.fixture
def png_view(tmp_path):
    """20 constant-valued 16x16 PNG slices (value encodes the index), every other one with a mask"""
    root = tmp_path / "pngs"
    view = []
    for i in range(20):
        image = f"p{i % 4}/img_{i:02d}.png"
        write_png(root / image, np.full((16, 16), 10 * i + 5))
        mask = None
        if i % 2 == 0:
            m = np.zeros((16, 16))
            m[i % 8:(i % 8) + 4, 3:9] = 255
            mask = f"p{i % 4}/img_{i:02d}_mask.png"
            write_png(root / mask, m)
        view.append(SampleRecord(image_path=image, mask_path=mask, patient_id=f"p{i % 4}", has_nodule=mask is not None))
    return root, view
