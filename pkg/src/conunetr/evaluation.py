"""Dice metric and per-volume / per-age evaluation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import AGES, SliceSample
from .model import map_slice_location


@dataclass(frozen=True)
class DiceResult:
    volume_id: str
    age_id: int
    mutation_id: int
    dice: float


def _as_binary(mask, what: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what} is not binary")
    return arr.astype(bool)


def dice_score(pred_mask, true_mask) -> float:
    """``2|A and B| / (|A| + |B|)``; two empty masks score 1.0."""
    a = _as_binary(pred_mask, "prediction")
    b = _as_binary(true_mask, "ground truth")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def binarize(probs: np.ndarray) -> np.ndarray:
    """Foreground where class 1 strictly beats class 0; ties go to background.

    ``probs`` is ``[..., 2, H, W]`` (probabilities or logits)."""
    probs = np.asarray(probs)
    return probs[..., 1, :, :] > probs[..., 0, :, :]


def nearest_token(age_id: int, trained_ages: Sequence[int]) -> int:
    """Token for ``age_id``: itself if trained, else the trained age closest in
    days (the younger one on a tie)."""
    if not trained_ages:
        raise ValueError("no trained ages to map onto")
    if age_id in trained_ages:
        return age_id
    days = AGES[age_id].days
    return min(sorted(trained_ages), key=lambda a: abs(AGES[a].days - days))


def token_policy(trained_ages: Sequence[int]) -> Callable[[int], int]:
    trained = sorted(set(trained_ages))
    return lambda age_id: nearest_token(age_id, trained)


def predict_masks(model, samples: Sequence[SliceSample], token_for: Callable[[int], int] = lambda a: a, batch_size: int = 8) -> np.ndarray:
    """Binary predictions ``[N, H, W]`` for a list of slices."""
    out = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = T.Tensor(np.stack([s.image for s in chunk]))
            ages = np.array([token_for(s.age_id) for s in chunk], dtype=np.int64)
            locs = np.array([map_slice_location(s.slice_index, s.total_slices) for s in chunk], dtype=np.int64)
            out.append(binarize(model.logits(images, ages, locs).data))
    return np.concatenate(out)


def evaluate(
    model,
    volumes: dict[str, Sequence[SliceSample]],
    token_for: Callable[[int], int] = lambda a: a,
    predictor: Optional[Callable] = None,
) -> tuple[list[DiceResult], dict[int, float]]:
    """One Dice per volume over its pooled annotated slices, then the mean per age.

    ``predictor(samples) -> [N, H, W]`` overrides model inference (used for
    oracle checks)."""
    if not volumes or not any(volumes.values()):
        raise ValueError("empty test set")
    results = []
    for vid in sorted(volumes):
        samples = volumes[vid]
        if not samples:
            continue
        size = model.config.img_size if model is not None else samples[0].mask.shape[0]
        if samples[0].mask.shape != (size, size):
            raise ValueError(f"volume {vid} slices are {samples[0].mask.shape}, model expects {size}x{size}")
        pred = predictor(samples) if predictor is not None else predict_masks(model, samples, token_for)
        truth = np.stack([s.mask for s in samples])
        results.append(DiceResult(vid, samples[0].age_id, samples[0].mutation_id, dice_score(pred, truth)))
    return results, age_means(results)


def age_means(results: Sequence[DiceResult]) -> dict[int, float]:
    groups = defaultdict(list)
    for r in results:
        groups[r.age_id].append(r.dice)
    return {age: float(np.mean(v)) for age, v in sorted(groups.items())}
