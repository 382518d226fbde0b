"""Training-time augmentations: random crop, flips, 90 degree rotations and a
Bezier-curve intensity remapping. Geometric ops act identically on image and
mask; the intensity op never touches the mask."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import SliceSample

BEZIER_SAMPLES = 1024


def bezier_curve(p1: Sequence[float], p2: Sequence[float], t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cubic Bezier with endpoints (0, 0) and (1, 1) evaluated at ``t``."""
    t = np.asarray(t, dtype=np.float64)
    u = 1.0 - t
    b1, b2, b3 = 3 * u * u * t, 3 * u * t * t, t**3
    return b1 * p1[0] + b2 * p2[0] + b3, b1 * p1[1] + b2 * p2[1] + b3


def bezier_intensity(image: np.ndarray, p1: Sequence[float], p2: Sequence[float]) -> np.ndarray:
    """Remap intensities in [0, 1] through the Bezier curve with controls ``p1``, ``p2``.

    The curve is sampled at 1024 parameter values and inverted along its x
    component by linear interpolation.
    """
    for p in (p1, p2):
        if len(p) != 2 or not all(0.0 <= c <= 1.0 for c in p):
            raise ValueError(f"Bezier control points must lie in the unit square, got {p}")
    xs, ys = bezier_curve(p1, p2, np.linspace(0.0, 1.0, BEZIER_SAMPLES))
    # x(t) is non-decreasing for controls inside the unit square
    xs = np.maximum.accumulate(xs)
    out = np.interp(image, xs, ys)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def _geometric(arr: np.ndarray, op: tuple) -> np.ndarray:
    """Apply one geometric op to the trailing (H, W) axes."""
    name = op[0]
    if name == "hflip":
        return arr[..., :, ::-1]
    if name == "vflip":
        return arr[..., ::-1, :]
    if name == "rot90":
        return np.rot90(arr, k=op[1], axes=(-2, -1))
    if name == "crop":
        _, r, c, size = op
        return arr[..., r : r + size, c : c + size]
    raise ValueError(f"unknown geometric op {name!r}")


def apply_ops(sample: SliceSample, ops: Sequence[tuple]) -> SliceSample:
    """Apply a concrete op list such as ``[("crop", r, c, 64), ("hflip",),
    ("rot90", 1), ("bezier", (x1, y1), (x2, y2))]`` in order."""
    image, mask = sample.image, sample.mask
    for op in ops:
        if op[0] == "bezier":
            image = bezier_intensity(image, op[1], op[2])
            continue
        if op[0] == "crop":
            size = op[3]
            if size > min(mask.shape) or op[1] + size > mask.shape[0] or op[2] + size > mask.shape[1]:
                raise ValueError(f"crop {op} does not fit inside {mask.shape}")
        image = _geometric(image, op)
        mask = _geometric(mask, op)
    return replace(sample, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))


@dataclass
class AugmentConfig:
    crop_size: int | None = None
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rot90: bool = True
    bezier_p: float = 0.5

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop_size=None, hflip_p=0.0, vflip_p=0.0, rot90=False, bezier_p=0.0)


def draw_ops(shape: tuple, cfg: AugmentConfig, rng: np.random.Generator) -> list[tuple]:
    """Draw a concrete op list for an ``(H, W)`` slice."""
    H, W = shape
    ops: list[tuple] = []
    if cfg.crop_size is not None:
        if cfg.crop_size > min(H, W):
            raise ValueError(f"crop size {cfg.crop_size} exceeds slice extents {H}x{W}")
        ops.append(("crop", int(rng.integers(0, H - cfg.crop_size + 1)), int(rng.integers(0, W - cfg.crop_size + 1)), cfg.crop_size))
    if rng.random() < cfg.hflip_p:
        ops.append(("hflip",))
    if rng.random() < cfg.vflip_p:
        ops.append(("vflip",))
    if cfg.rot90:
        k = int(rng.integers(0, 4))
        if k:
            ops.append(("rot90", k))
    if rng.random() < cfg.bezier_p:
        p = rng.uniform(0.0, 1.0, size=4)
        ops.append(("bezier", (float(p[0]), float(p[1])), (float(p[2]), float(p[3]))))
    return ops


def augment(sample: SliceSample, cfg: AugmentConfig, seed) -> tuple[SliceSample, list[tuple]]:
    """Randomly augment one sample; returns the new sample and the ops applied."""
    ops = draw_ops(sample.mask.shape, cfg, np.random.default_rng(seed))
    return apply_ops(sample, ops), ops
