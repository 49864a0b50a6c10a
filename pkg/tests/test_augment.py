import numpy as np
import pytest

from src.augment import apply_transform, augment_pair, sample_rng, sample_transform
from src.models import AugmentPolicy, Transform


@pytest.fixture
def pair():
    rng = np.random.default_rng(7)
    image = rng.random((8, 8))
    mask = (image > 0.5).astype(np.uint8)
    return image, mask


class TestTransform:
    def test_identity(self, pair):
        image, _ = pair
        np.testing.assert_array_equal(apply_transform(image, Transform()), image)

    def test_hflip_reverses_columns(self):
        a = np.arange(6).reshape(2, 3)
        np.testing.assert_array_equal(apply_transform(a, Transform(hflip=True)), [[2, 1, 0], [5, 4, 3]])

    def test_rotation_is_counter_clockwise(self):
        a = np.array([[1, 2], [3, 4]])
        np.testing.assert_array_equal(apply_transform(a, Transform(rotation=90)), [[2, 4], [1, 3]])

    def test_four_quarter_turns(self, pair):
        image, _ = pair
        out = image
        for _ in range(4):
            out = apply_transform(out, Transform(rotation=90))
        np.testing.assert_array_equal(out, image)

    def test_output_is_contiguous(self, pair):
        out = apply_transform(pair[0], Transform(hflip=True, rotation=270))
        assert out.flags["C_CONTIGUOUS"]


class TestAugmentPair:
    def test_mask_stays_aligned(self, pair):
        image, mask = pair
        rng = np.random.default_rng(0)
        for _ in range(50):
            img, msk, _ = augment_pair(image, mask, rng, AugmentPolicy())
            np.testing.assert_array_equal(msk, (img > 0.5).astype(np.uint8))

    def test_mask_stays_binary_and_preserves_area(self, pair):
        image, mask = pair
        _, msk, _ = augment_pair(image, mask, np.random.default_rng(3), AugmentPolicy())
        assert set(np.unique(msk)) <= {0, 1}
        assert msk.sum() == mask.sum()

    def test_same_key_same_transform(self, pair):
        image, mask = pair
        a = augment_pair(image, mask, sample_rng(0, 2, 5), AugmentPolicy())
        b = augment_pair(image, mask, sample_rng(0, 2, 5), AugmentPolicy())
        assert a[2] == b[2]
        np.testing.assert_array_equal(a[0], b[0])

    def test_keys_cover_all_transforms(self):
        seen = [sample_transform(sample_rng(0, 0, i), AugmentPolicy()) for i in range(400)]
        assert {t.rotation for t in seen} == {0, 90, 180, 270}
        assert {t.hflip for t in seen} == {False, True}

    def test_disabled_policy_is_identity(self, pair):
        image, mask = pair
        policy = AugmentPolicy(p_hflip=0.0, p_vflip=0.0, rotations=(0,))
        img, msk, t = augment_pair(image, mask, np.random.default_rng(1), policy)
        assert t == Transform()
        np.testing.assert_array_equal(img, image)
        np.testing.assert_array_equal(msk, mask)

    def test_constant_draw_count(self):
        one = np.random.default_rng(9)
        four = np.random.default_rng(9)
        sample_transform(one, AugmentPolicy(rotations=(0,)))
        sample_transform(four, AugmentPolicy())
        assert one.random() == four.random()

    def test_shape_mismatch(self, pair):
        with pytest.raises(ValueError, match="differ in shape"):
            augment_pair(pair[0], np.zeros((4, 4)), np.random.default_rng(0), AugmentPolicy())

    def test_quarter_turns_need_square(self):
        with pytest.raises(ValueError, match="square"):
            augment_pair(np.zeros((4, 6)), np.zeros((4, 6)), np.random.default_rng(0), AugmentPolicy())

    def test_bad_rotation(self):
        with pytest.raises(ValueError):
            AugmentPolicy(rotations=(45,))
