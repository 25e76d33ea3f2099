"""Training-time augmentations with deterministic per-sample seeding.

Detector samples get random crop, random scale and random flip; the depth
network only gets horizontal flips (upper and lower jaws are asymmetric, so
vertical or depth flips would change the anatomy).  Every random draw comes
from a seed derived via a stable hash of (global seed, epoch, sample index),
so data order and worker scheduling cannot change the result.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError

CROP_FACTOR_RANGE = (0.7, 1.0)
SCALE_RANGE = (0.8, 1.2)


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts (global seed, epoch, index...)."""
    payload = ":".join(str(int(p)) for p in parts).encode("ascii")
    digest = hashlib.blake2s(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize (align_corners=False convention)."""
    if image.ndim != 2:
        raise ShapeError(f"expected 2D image, got shape {image.shape}")
    if image.shape == (out_h, out_w):
        return image.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    out = torch.nn.functional.interpolate(
        t[None, None], size=(out_h, out_w), mode="bilinear",
        align_corners=False)
    return out[0, 0].numpy()


def map_coordinate(x: float, in_size: int, out_size: int) -> float:
    """Pixel-center coordinate mapping matching resize_image."""
    return (x + 0.5) * (out_size / in_size) - 0.5


@dataclass(frozen=True)
class DetectorAugment:
    """Resolved augmentation parameters for one detector sample."""

    crop_origin: tuple[int, int]
    crop_size: int
    scale: float
    flip: bool

    @classmethod
    def identity(cls, size: int) -> "DetectorAugment":
        return cls(crop_origin=(0, 0), crop_size=size, scale=1.0, flip=False)


def _origin_bounds(pos: float, window: int, limit: int) -> tuple[int, int]:
    """Origin range keeping `pos` at least 1 px inside a window of `window`."""
    lo = max(0, int(np.ceil(pos)) - window + 2)
    hi = min(limit - window, int(np.floor(pos)) - 1)
    return lo, hi


def _window_containing(pos: float, window: int, limit: int,
                       rng: np.random.Generator) -> int:
    """Random window origin keeping `pos` at least 1 px inside the window."""
    lo, hi = _origin_bounds(pos, window, limit)
    if hi < lo:
        return int(np.clip(round(pos - window / 2), 0, limit - window))
    return int(rng.integers(lo, hi + 1))


def _fit_window(pos: float, window: int, limit: int) -> int:
    """Centered window origin, translated minimally so `pos` stays inside."""
    lo, hi = _origin_bounds(pos, window, limit)
    centered = (limit - window) // 2
    if hi < lo:
        return int(np.clip(round(pos - window / 2), 0, limit - window))
    return int(np.clip(centered, lo, hi))


def draw_detector_augment(size: int, position: tuple[float, float],
                          seed: int) -> DetectorAugment:
    rng = np.random.default_rng(seed)
    factor = rng.uniform(*CROP_FACTOR_RANGE)
    crop = max(8, int(round(factor * size)))
    origin = (
        _window_containing(position[0], crop, size, rng),
        _window_containing(position[1], crop, size, rng),
    )
    scale = float(rng.uniform(*SCALE_RANGE))
    flip = bool(rng.random() < 0.5)
    return DetectorAugment(crop_origin=origin, crop_size=crop, scale=scale,
                           flip=flip)


def apply_detector_augment(
    image: np.ndarray, position: tuple[float, float], params: DetectorAugment
) -> tuple[np.ndarray, tuple[float, float]]:
    """Crop -> resize back -> scale -> fit -> flip, position kept in bounds."""
    size = image.shape[0]
    if image.shape[0] != image.shape[1]:
        raise ShapeError(f"detector samples must be square, got {image.shape}")
    row, col = position

    # Random crop, then resize back to the nominal size.
    (r0, c0), crop = params.crop_origin, params.crop_size
    if (r0, c0) != (0, 0) or crop != size:
        image = image[r0:r0 + crop, c0:c0 + crop]
        image = resize_image(image, size, size)
        row = map_coordinate(row - r0, crop, size)
        col = map_coordinate(col - c0, crop, size)

    # Random scale, then crop or pad back to the nominal size.
    scaled = int(round(params.scale * size))
    if scaled != size:
        image = resize_image(image, scaled, scaled)
        row = map_coordinate(row, size, scaled)
        col = map_coordinate(col, size, scaled)
        if scaled > size:
            r0 = _fit_window(row, size, scaled)
            c0 = _fit_window(col, size, scaled)
            image = image[r0:r0 + size, c0:c0 + size]
            row, col = row - r0, col - c0
        else:
            top = (size - scaled) // 2
            left = (size - scaled) // 2
            padded = np.zeros((size, size), dtype=np.float32)
            padded[top:top + scaled, left:left + scaled] = image
            image = padded
            row, col = row + top, col + left

    if params.flip:
        image = image[:, ::-1]
        col = size - 1 - col

    row = float(np.clip(row, 0.0, size - 1))
    col = float(np.clip(col, 0.0, size - 1))
    return np.ascontiguousarray(image, dtype=np.float32), (row, col)


def augment_detector_sample(
    image: np.ndarray, position: tuple[float, float], seed: int
) -> tuple[np.ndarray, tuple[float, float]]:
    params = draw_detector_augment(image.shape[0], position, seed)
    return apply_detector_augment(image, position, params)


def augment_depth_sample(voxels: np.ndarray, seed: int) -> np.ndarray:
    """Horizontal flip with probability 1/2: (d, h, w) -> (d, h, W-1-w).

    The depth interval is untouched; the flip is entirely within-slice.
    """
    if voxels.ndim != 3:
        raise ShapeError(f"expected (D, H, W) voxels, got shape {voxels.shape}")
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        return np.ascontiguousarray(voxels[:, :, ::-1])
    return voxels
