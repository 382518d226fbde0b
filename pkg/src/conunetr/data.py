"""Procedural multi-age, multi-mutation cartilage phantoms and dataset I/O.

A phantom volume is a stack of 2D slices showing thin ribbon-like structures
that drift smoothly from slice to slice. Two ribbon populations are drawn:
cartilage (labelled in the mask) and precartilage condensations (visible but
unlabelled). An :class:`AgeProfile` controls thickness, discontinuities,
boundary sharpness and how strongly each population takes up stain, so the
intensity that marks cartilage shifts with age. A :class:`MutationProfile`
perturbs the morphology on top of that.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class AgeProfile:
    age_id: int
    name: str
    days: float
    mean_thickness: float
    gap_rate: float
    boundary_blur_sigma: float
    contrast: float
    condensation_contrast: float

    def __post_init__(self):
        if self.mean_thickness <= 0:
            raise ValueError("mean_thickness must be positive")
        if not 0 <= self.gap_rate < 1:
            raise ValueError("gap_rate must lie in [0, 1)")
        if not (0 <= self.contrast <= 1 and 0 <= self.condensation_contrast <= 1):
            raise ValueError("contrasts must lie in [0, 1]")


@dataclass(frozen=True)
class MutationProfile:
    mutation_id: int
    name: str
    curvature_bias: float = 0.0
    thickness_scale: float = 1.0
    texture_noise_level: float = 0.0

    def __post_init__(self):
        if self.thickness_scale <= 0:
            raise ValueError("thickness_scale must be positive")


# Stain uptake rises with age. Condensations stay dimmer than cartilage of the
# same age but reach the cartilage intensity of a younger age, so the level
# that marks cartilage depends on age.
AGES = {
    0: AgeProfile(0, "E13.5", 13.5, 2.2, 0.30, 0.7, 0.36, 0.16),
    1: AgeProfile(1, "E14.5", 14.5, 3.0, 0.20, 0.6, 0.56, 0.36),
    2: AgeProfile(2, "E15.5", 15.5, 3.8, 0.10, 0.5, 0.80, 0.66),
    3: AgeProfile(3, "E16.5", 16.5, 4.6, 0.05, 0.4, 0.86, 0.66),
}

MUTATIONS = {
    0: MutationProfile(0, "MUTA"),
    1: MutationProfile(1, "ACH", curvature_bias=0.4, thickness_scale=0.85, texture_noise_level=0.02),
}

IDENTITY_MUTATION = MUTATIONS[0]

BASE_NOISE = 0.04
BACKGROUND_LEVEL = 0.18
N_CARTILAGE = 5
N_CONDENSATION = 5
GAP_SEGMENTS = 10
CURVE_POINTS = 600


@dataclass
class Ribbon:
    start: np.ndarray
    end: np.ndarray
    drift_start: np.ndarray
    drift_end: np.ndarray
    amplitude: float
    frequency: float
    phase: float
    phase_drift: float
    width_factor: float
    width_wobble: float
    gap_draws: np.ndarray
    cartilage: bool


class PhantomVolume:
    """Geometry of one phantom volume; slices are rendered on demand.

    All random draws are made in a fixed order that does not depend on the
    profile values, so two volumes with the same seed share geometry and
    differ only through their profiles.
    """

    def __init__(
        self,
        age: AgeProfile,
        mutation: MutationProfile,
        height: int,
        width: int,
        total_slices: int,
        seed: int,
    ):
        if height < 64 or width < 64:
            raise ValueError(f"slice extents must be >= 64, got {height}x{width}")
        if total_slices < 20:
            raise ValueError(f"a volume needs >= 20 slices, got {total_slices}")
        self.age = age
        self.mutation = mutation
        self.height = height
        self.width = width
        self.total_slices = total_slices
        self.seed = seed
        # lengths are specified at 64 px and scale with the slice size
        self.scale = min(height, width) / 64.0
        rng = np.random.default_rng([seed, 0])
        self.brightness = float(rng.uniform(-0.03, 0.03))
        self.ribbons = [self._draw_ribbon(rng, i < N_CARTILAGE) for i in range(N_CARTILAGE + N_CONDENSATION)]
        self._fields = [ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma=10 * self.scale) for _ in range(2)]
        self._fields = [f / (np.abs(f).max() + 1e-12) * 0.05 for f in self._fields]

    def _draw_ribbon(self, rng: np.random.Generator, cartilage: bool) -> Ribbon:
        size = np.array([self.height, self.width], dtype=np.float64)
        start = rng.uniform(0.08, 0.92, size=2) * size
        angle = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(0.35, 0.7) * size.min()
        end = np.clip(start + length * np.array([math.sin(angle), math.cos(angle)]), 2, size - 3)
        return Ribbon(
            start=start,
            end=end,
            drift_start=rng.uniform(-12, 12, size=2) * self.scale,
            drift_end=rng.uniform(-12, 12, size=2) * self.scale,
            amplitude=rng.uniform(3.0, 10.0) * self.scale,
            frequency=rng.uniform(0.5, 1.5),
            phase=rng.uniform(0, 2 * math.pi),
            phase_drift=rng.uniform(-math.pi, math.pi),
            width_factor=rng.uniform(0.75, 1.25),
            width_wobble=rng.uniform(0, 2 * math.pi),
            gap_draws=rng.uniform(0, 1, size=GAP_SEGMENTS),
            cartilage=cartilage,
        )

    def _ribbon_indicator(self, rib: Ribbon, frac: float) -> np.ndarray:
        t = np.linspace(0.0, 1.0, CURVE_POINTS)
        a = rib.start + rib.drift_start * (frac - 0.5)
        b = rib.end + rib.drift_end * (frac - 0.5)
        direction = b - a
        normal = np.array([-direction[1], direction[0]]) / (np.linalg.norm(direction) + 1e-9)
        amp = rib.amplitude * (1.0 + self.mutation.curvature_bias)
        offset = amp * np.sin(2 * math.pi * rib.frequency * t + rib.phase + rib.phase_drift * frac)
        pts = a[None, :] + t[:, None] * direction[None, :] + offset[:, None] * normal[None, :]
        thickness = (
            self.age.mean_thickness
            * self.scale
            * self.mutation.thickness_scale
            * rib.width_factor
            * (1.0 + 0.2 * np.sin(2 * math.pi * t + rib.width_wobble))
        )
        seg = np.minimum((t * GAP_SEGMENTS).astype(int), GAP_SEGMENTS - 1)
        keep = rib.gap_draws[seg] >= self.age.gap_rate
        rows = np.clip(np.rint(pts[:, 0]).astype(int), 0, self.height - 1)
        cols = np.clip(np.rint(pts[:, 1]).astype(int), 0, self.width - 1)
        rows, cols, thickness = rows[keep], cols[keep], thickness[keep]
        if rows.size == 0:
            return np.zeros((self.height, self.width), dtype=bool)
        seed_map = np.ones((self.height, self.width), dtype=bool)
        seed_map[rows, cols] = False
        half = np.zeros((self.height, self.width))
        half[rows, cols] = thickness / 2.0
        dist, (ir, ic) = ndimage.distance_transform_edt(seed_map, return_indices=True)
        return dist <= np.maximum(half[ir, ic], 0.5)

    def render(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(image [H, W] float32 in [0, 1], mask [H, W] uint8)`` for one slice."""
        if not 0 <= index < self.total_slices:
            raise IndexError(f"slice {index} out of range for {self.total_slices} slices")
        frac = index / (self.total_slices - 1)
        rng = np.random.default_rng([self.seed, 1, index])
        image = BACKGROUND_LEVEL + self.brightness + (1 - frac) * self._fields[0] + frac * self._fields[1]
        lift = np.zeros((self.height, self.width))
        mask = np.zeros((self.height, self.width), dtype=bool)
        for rib in self.ribbons:
            ind = self._ribbon_indicator(rib, frac)
            level = self.age.contrast if rib.cartilage else self.age.condensation_contrast
            soft = ndimage.gaussian_filter(ind.astype(np.float64), sigma=self.age.boundary_blur_sigma * self.scale)
            lift = np.maximum(lift, level * soft)
            if rib.cartilage:
                mask |= ind
        sigma = BASE_NOISE + self.mutation.texture_noise_level
        image = image + lift + rng.normal(0.0, sigma, size=image.shape)
        return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(self.total_slices):
            yield self.render(i)


def generate_volume(
    age: AgeProfile,
    mutation: MutationProfile,
    height: int,
    width: int,
    total_slices: int,
    seed: int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Render every slice of a phantom volume."""
    return list(PhantomVolume(age, mutation, height, width, total_slices, seed))


def sample_annotated_slices(total_slices: int, budget_fraction: float, seed: int = 0) -> list[int]:
    """Evenly spaced (stratified) annotated slice indices for a budget.

    One index is drawn uniformly inside each of ``count`` equal strata, then
    pulled towards the stratum centre so neighbouring picks stay apart.
    """
    if not 0 < budget_fraction <= 1:
        raise ValueError("budget_fraction must lie in (0, 1]")
    count = max(1, int(round(budget_fraction * total_slices)))
    if count >= total_slices:
        return list(range(total_slices))
    rng = np.random.default_rng(seed)
    width = total_slices / count
    jitter = rng.uniform(-0.2, 0.2, size=count) * width
    centres = (np.arange(count) + 0.5) * width + jitter
    idx = np.floor(centres).astype(int)
    # dense budgets can floor two strata onto one slice; keep picks strictly increasing
    for k in range(count):
        lo = idx[k - 1] + 1 if k else 0
        idx[k] = min(max(idx[k], lo), total_slices - count + k)
    return [int(i) for i in idx]


@dataclass
class SliceSample:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    age_id: int
    mutation_id: int
    volume_id: str
    slice_index: int
    total_slices: int

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree")
        if not 0 <= self.slice_index < self.total_slices:
            raise ValueError("slice_index out of range")


# -- dataset layout -----------------------------------------------------------------
@dataclass
class VolumeRecord:
    volume_id: str
    mutation: str
    mutation_id: int
    age: str
    age_id: int
    split: str
    total_slices: int
    annotated: list
    seed: int
    images: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    checksums: dict = field(default_factory=dict)


@dataclass
class DatasetConfig:
    img_size: int = 128
    total_slices: int = 100
    budget_fraction: float = 0.05
    train_per_age: int = 3
    test_per_age: int = 2
    seed: int = 0
    # (mutation id, age id, has training volumes)
    cohorts: tuple = ((0, 0, True), (0, 1, True), (0, 2, True), (1, 1, False), (1, 3, False))


@dataclass
class DatasetManifest:
    config: DatasetConfig
    volumes: list

    def select(self, split: Optional[str] = None, mutation_id: Optional[int] = None, age_ids=None) -> list:
        out = []
        for v in self.volumes:
            if split is not None and v.split != split:
                continue
            if mutation_id is not None and v.mutation_id != mutation_id:
                continue
            if age_ids is not None and v.age_id not in age_ids:
                continue
            out.append(v)
        return out


def _volume_seed(base: int, mutation_id: int, age_id: int, split: str, k: int) -> int:
    digest = hashlib.sha256(f"{base}/{mutation_id}/{age_id}/{split}/{k}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def build_manifest(config: DatasetConfig) -> DatasetManifest:
    """Lay out volumes, seeds and annotated slices (no rendering)."""
    volumes = []
    for mutation_id, age_id, has_train in config.cohorts:
        mut, age = MUTATIONS[mutation_id], AGES[age_id]
        splits = ([("train", config.train_per_age)] if has_train else []) + [("test", config.test_per_age)]
        for split, n in splits:
            for k in range(n):
                seed = _volume_seed(config.seed, mutation_id, age_id, split, k)
                vid = f"{mut.name}-{age.name}-{split}{k}"
                annotated = sample_annotated_slices(config.total_slices, config.budget_fraction, seed)
                rel = Path(mut.name) / age.name / vid
                volumes.append(
                    VolumeRecord(
                        volume_id=vid,
                        mutation=mut.name,
                        mutation_id=mutation_id,
                        age=age.name,
                        age_id=age_id,
                        split=split,
                        total_slices=config.total_slices,
                        annotated=annotated,
                        seed=seed,
                        images=[str(rel / f"slice_{i}.raw") for i in annotated],
                        masks=[str(rel / f"mask_{i}.raw") for i in annotated],
                    )
                )
    return DatasetManifest(config, volumes)


def render_volume_samples(record: VolumeRecord, img_size: int) -> list[SliceSample]:
    vol = PhantomVolume(AGES[record.age_id], MUTATIONS[record.mutation_id], img_size, img_size, record.total_slices, record.seed)
    out = []
    for i in record.annotated:
        image, mask = vol.render(i)
        out.append(SliceSample(image[None], mask, record.age_id, record.mutation_id, record.volume_id, i, record.total_slices))
    return out


def materialize(manifest: DatasetManifest) -> dict[str, list[SliceSample]]:
    """Render the annotated slices of every volume, keyed by volume id."""
    return {v.volume_id: render_volume_samples(v, manifest.config.img_size) for v in manifest.volumes}


class DatasetError(RuntimeError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(manifest: DatasetManifest, root, samples: Optional[dict] = None) -> Path:
    """Render (unless ``samples`` is given) and store annotated slices as raw
    little-endian arrays, plus a JSON manifest at ``root/manifest.json``."""
    root = Path(root)
    samples = samples if samples is not None else materialize(manifest)
    for vol in manifest.volumes:
        vol.checksums = {}
        for sample, img_rel, mask_rel in zip(samples[vol.volume_id], vol.images, vol.masks):
            for rel, arr in ((img_rel, sample.image[0].astype("<f4")), (mask_rel, sample.mask.astype("u1"))):
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                raw = arr.tobytes()
                path.write_bytes(raw)
                vol.checksums[rel] = _sha256(raw)
    doc = {
        "version": MANIFEST_VERSION,
        "config": asdict(manifest.config),
        "profiles": {
            "ages": {k: asdict(v) for k, v in AGES.items()},
            "mutations": {k: asdict(v) for k, v in MUTATIONS.items()},
        },
        "volumes": [asdict(v) for v in manifest.volumes],
    }
    (root / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return root / MANIFEST_NAME


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from None
    try:
        if doc["version"] != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {doc['version']}")
        cfg = dict(doc["config"])
        cfg["cohorts"] = tuple(tuple(c) for c in cfg["cohorts"])
        config = DatasetConfig(**cfg)
        volumes = [VolumeRecord(**v) for v in doc["volumes"]]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed manifest {path}: {exc!r}") from None
    for v in volumes:
        if len(v.images) != len(v.annotated) or len(v.masks) != len(v.annotated):
            raise DatasetError(f"volume {v.volume_id}: path lists do not match annotated slices")
    return DatasetManifest(config, volumes)


def _read_raw(root: Path, rel: str, dtype: str, shape: tuple, checksum: Optional[str]) -> np.ndarray:
    path = root / rel
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DatasetError(f"shape mismatch in {path}: {len(raw)} bytes, expected {expected}")
    if checksum is not None and _sha256(raw) != checksum:
        raise DatasetError(f"checksum mismatch: {path}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_dataset(root) -> tuple[DatasetManifest, dict[str, list[SliceSample]]]:
    root = Path(root)
    manifest = load_manifest(root)
    n = manifest.config.img_size
    samples = {}
    for v in manifest.volumes:
        vol_samples = []
        for idx, img_rel, mask_rel in zip(v.annotated, v.images, v.masks):
            image = _read_raw(root, img_rel, "<f4", (n, n), v.checksums.get(img_rel)).astype(np.float32)
            mask = _read_raw(root, mask_rel, "u1", (n, n), v.checksums.get(mask_rel))
            vol_samples.append(SliceSample(image[None], mask, v.age_id, v.mutation_id, v.volume_id, idx, v.total_slices))
        samples[v.volume_id] = vol_samples
    return manifest, samples


def samples_for(manifest: DatasetManifest, samples: dict, volumes: Sequence[VolumeRecord]) -> list[SliceSample]:
    return [s for v in volumes for s in samples[v.volume_id]]
