"""
Label-consistent geometric augmentation: flips and quarter-turn rotations
"""
from typing import Tuple

import numpy as np

from src.models import AugmentPolicy, Transform


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator keyed by (seed, epoch, sample index), independent of worker scheduling"""
    return np.random.default_rng([seed, epoch, index])


def sample_transform(rng: np.random.Generator, policy: AugmentPolicy) -> Transform:
    """Draw one transform; always consumes the same number of draws"""
    hflip = bool(rng.random() < policy.p_hflip)
    vflip = bool(rng.random() < policy.p_vflip)
    k = len(policy.rotations)
    # one uniform draw picks the rotation, whatever k is
    rotation = policy.rotations[min(int(rng.random() * k), k - 1)]
    return Transform(hflip=hflip, vflip=vflip, rotation=rotation)


def apply_transform(arr: np.ndarray, t: Transform) -> np.ndarray:
    """Horizontal flip, then vertical flip, then counter-clockwise rotation"""
    out = arr
    if t.hflip:
        out = out[:, ::-1]
    if t.vflip:
        out = out[::-1, :]
    if t.rotation:
        out = np.rot90(out, k=t.rotation // 90)
    return np.ascontiguousarray(out)


def augment_pair(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    policy: AugmentPolicy,
) -> Tuple[np.ndarray, np.ndarray, Transform]:
    """
    Apply one sampled transform identically to an image and its mask

    rng is advanced in place. Quarter turns on non-square slices would change
    the slice shape, so they are rejected up front.
    """
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    if image.shape[0] != image.shape[1] and any(r in (90, 270) for r in policy.rotations):
        raise ValueError(f"90/270 degree rotations need square slices, got {image.shape}")
    t = sample_transform(rng, policy)
    return apply_transform(image, t), apply_transform(mask, t), t
