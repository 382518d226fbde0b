"""Study runner: train/evaluate matrices over cohorts, variants and seeds.

A study trains one model per (variant, training cohort, seed) and evaluates
it on every requested test age. Trained runs are cached by their full
training identity, so studies that share a cell (the all-ages token model of
the joint grid and of the ablation, say) train it once.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig
from .data import AGES, MUTATIONS, DatasetConfig, DatasetManifest, build_manifest, materialize, samples_for
from .evaluation import evaluate, token_policy
from .model import build_model, preset_config, unet_preset_config
from .training import AdamW, ScheduleConfig, TrainRunConfig, train

log = logging.getLogger(__name__)

STUDY_KINDS = ("individual", "joint", "cross_mutation", "data_scaling", "ablation")
REPORT_COLUMNS = ("variant", "train_cohort", "test_age", "mean_dice", "sd", "n_runs", "status")
SCALING_COLUMNS = ("variant", "train_volumes", "mean_dice")


class StudyError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    name: str
    arch: str = "conunetr"
    conditioning_mode: str = "age_token"
    spatial_mode: str = "sinusoid"

    def model_config(self, preset: str, seed: int):
        if self.arch == "unet":
            return unet_preset_config(preset, seed=seed)
        if self.arch != "conunetr":
            raise StudyError(f"unknown architecture {self.arch!r} in variant {self.name!r}")
        return preset_config(preset, conditioning_mode=self.conditioning_mode, spatial_mode=self.spatial_mode, seed=seed)


TOKEN = Variant("age_token")
# Random intensity remapping scrambles the age-specific contrast that the
# synthetic cohorts encode, so studies keep only the geometric augmentations.
STUDY_AUGMENT = AugmentConfig(bezier_p=0.0)
ABLATION_VARIANTS = (
    Variant("none", conditioning_mode="none", spatial_mode="sinusoid"),
    Variant("embedding", conditioning_mode="age_embedding", spatial_mode="none"),
    Variant("embedding+spatial", conditioning_mode="age_embedding", spatial_mode="sinusoid"),
    Variant("token", conditioning_mode="age_token", spatial_mode="none"),
    Variant("token+spatial", conditioning_mode="age_token", spatial_mode="sinusoid"),
)

_KIND_DEFAULTS = {
    "individual": dict(train_cohorts=[[0], [1], [2]], test_ages=[0, 1, 2]),
    "joint": dict(train_cohorts=[[0, 1], [1, 2], [0, 1, 2]], test_ages=[0, 1, 2]),
    "cross_mutation": dict(train_cohorts=[[0, 1, 2]], test_mutation=1, test_ages=[1, 3]),
    "data_scaling": dict(train_cohorts=[[0, 1, 2]], test_ages=[0, 1, 2], volume_counts=[1, 2, 3]),
    "ablation": dict(train_cohorts=[[0, 1, 2]], test_ages=[0, 1, 2], variants=[asdict(v) for v in ABLATION_VARIANTS]),
}


@dataclass
class StudyConfig:
    kind: str
    name: str = ""
    preset: str = "desk"
    train_cohorts: list = field(default_factory=list)
    train_mutation: int = 0
    test_ages: list = field(default_factory=list)
    test_mutation: int = 0
    volume_counts: Optional[list] = None
    variants: Optional[list] = None
    repetitions: int = 3
    seeds: Optional[list] = None
    epochs: int = 80
    lr: float = 2e-3
    lr_min: float = 0.0
    batch_size: int = 1
    weight_decay: float = 1e-3
    augment: dict = field(default_factory=lambda: asdict(STUDY_AUGMENT))
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STUDY_KINDS:
            raise StudyError(f"study kind must be one of {STUDY_KINDS}, got {self.kind!r}")
        if not self.name:
            self.name = self.kind
        for key, value in _KIND_DEFAULTS[self.kind].items():
            if not getattr(self, key) and value is not None:
                setattr(self, key, value)
        if not self.variants:
            self.variants = [asdict(TOKEN)]
        if self.repetitions < 1:
            raise StudyError("repetitions must be >= 1")
        if self.seeds is None:
            self.seeds = list(range(self.repetitions))
        if len(self.seeds) != self.repetitions:
            raise StudyError(f"{len(self.seeds)} seeds given for {self.repetitions} repetitions")
        if not self.train_cohorts or not all(self.train_cohorts):
            raise StudyError("train_cohorts must be a non-empty list of non-empty age lists")
        if not self.test_ages:
            raise StudyError("test_ages must not be empty")
        if self.kind == "data_scaling" and not self.volume_counts:
            raise StudyError("data_scaling needs volume_counts")
        names = [v["name"] for v in self.variants]
        if len(set(names)) != len(names):
            raise StudyError(f"duplicate variant names: {names}")
        self.variant_objects()

    def variant_objects(self) -> list[Variant]:
        try:
            return [Variant(**v) for v in self.variants]
        except TypeError as exc:
            raise StudyError(f"bad variant entry: {exc}") from None

    def dataset_config(self) -> DatasetConfig:
        cfg = dict(self.dataset)
        cfg.setdefault("img_size", preset_config(self.preset).img_size)
        if "cohorts" in cfg:
            cfg["cohorts"] = tuple(tuple(c) for c in cfg["cohorts"])
        try:
            return DatasetConfig(**cfg)
        except TypeError as exc:
            raise StudyError(f"bad dataset entry: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise StudyError(f"unknown study config key(s): {', '.join(unknown)}")
        return cls(**doc)


def load_study_config(path) -> StudyConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise StudyError(f"study config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise StudyError(f"study config {path} is not valid JSON: {exc}") from None
    return StudyConfig.from_dict(doc)


@dataclass
class ReportRow:
    variant: str
    train_cohort: str
    test_age: str
    runs: list
    status: str = "ok"

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    @property
    def mean_dice(self) -> Optional[float]:
        return float(np.mean(self.runs)) if self.runs and self.status == "ok" else None

    @property
    def sd(self) -> Optional[float]:
        if not self.runs or self.status != "ok":
            return None
        return float(np.std(self.runs, ddof=1)) if len(self.runs) > 1 else 0.0


@dataclass
class StudyReport:
    name: str
    kind: str
    rows: list
    series: list = field(default_factory=list)  # (variant, train_volumes, mean_dice)

    def cell(self, variant: str, train_cohort: str, test_age: str) -> ReportRow:
        for row in self.rows:
            if (row.variant, row.train_cohort, row.test_age) == (variant, train_cohort, test_age):
                return row
        raise KeyError((variant, train_cohort, test_age))


def cohort_label(ages: Sequence[int], volumes: Optional[int] = None) -> str:
    label = "+".join(AGES[a].name for a in ages)
    return label if volumes is None else f"{label}/n={volumes}"


class RunCache:
    """Trained models keyed by their complete training identity."""

    def __init__(self):
        self._runs: dict = {}
        self.trained = 0

    def get(self, key, builder):
        if key not in self._runs:
            try:
                self._runs[key] = ("ok", builder())
            except Exception as exc:  # a failed cell must not stop the study
                log.warning("run %s failed: %s", key, exc)
                self._runs[key] = ("failed", exc)
            self.trained += 1
        return self._runs[key]


def _check_cohorts(cfg: StudyConfig, manifest: DatasetManifest) -> None:
    for ages in cfg.train_cohorts:
        for a in ages:
            if a not in AGES:
                raise StudyError(f"unknown age id {a} in train_cohorts")
            if not manifest.select("train", cfg.train_mutation, [a]):
                raise StudyError(
                    f"no training volumes for {MUTATIONS[cfg.train_mutation].name} {AGES[a].name} in the manifest"
                )
    for a in cfg.test_ages:
        if a not in AGES or not manifest.select("test", cfg.test_mutation, [a]):
            raise StudyError(f"no test volumes for mutation {cfg.test_mutation} age {a} in the manifest")
    train_ids = {v.volume_id for v in manifest.select("train")}
    test_ids = {v.volume_id for v in manifest.select("test")}
    if train_ids & test_ids:
        raise StudyError("train and test volumes overlap")


def _train_run(cfg: StudyConfig, variant: Variant, ages, n_volumes, seed, manifest, samples):
    vols = []
    for a in ages:
        pool = manifest.select("train", cfg.train_mutation, [a])
        vols.extend(pool if n_volumes is None else pool[:n_volumes])
    data = samples_for(manifest, samples, vols)
    model = build_model(variant.model_config(cfg.preset, seed))
    k = getattr(model.config, "k_ages", None)
    if k is not None and max(ages) >= k:
        raise StudyError(f"age id {max(ages)} has no token (k_ages={k})")
    run_cfg = TrainRunConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed, augment=AugmentConfig(**cfg.augment)
    )
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    train(model, data, run_cfg, ScheduleConfig(cfg.lr, cfg.lr_min, cfg.epochs), opt)
    return model


def run_study(cfg: StudyConfig, data=None, cache: Optional[RunCache] = None) -> StudyReport:
    """Execute the train/evaluate matrix of ``cfg``.

    ``data`` is ``(manifest, samples)``; it is generated from
    ``cfg.dataset`` when omitted.
    """
    if data is None:
        manifest = build_manifest(cfg.dataset_config())
        samples = materialize(manifest)
    else:
        manifest, samples = data
    _check_cohorts(cfg, manifest)
    cache = cache if cache is not None else RunCache()
    hyper = (cfg.preset, cfg.epochs, cfg.lr, cfg.lr_min, cfg.batch_size, cfg.weight_decay,
             json.dumps(cfg.augment, sort_keys=True), cfg.train_mutation, json.dumps(asdict(manifest.config), sort_keys=True))
    test_sets = {
        a: {v.volume_id: samples[v.volume_id] for v in manifest.select("test", cfg.test_mutation, [a])}
        for a in cfg.test_ages
    }
    counts = cfg.volume_counts if cfg.kind == "data_scaling" else [None]
    rows, series = [], []
    for variant in cfg.variant_objects():
        for ages in cfg.train_cohorts:
            ages = sorted(ages)
            for n_vol in counts:
                label = cohort_label(ages, n_vol)
                per_age = {a: [] for a in cfg.test_ages}
                failed = False
                for seed in cfg.seeds:
                    # the display name is not part of a run's identity
                    key = (variant.arch, variant.conditioning_mode, variant.spatial_mode, tuple(ages), n_vol, seed, hyper)
                    status, result = cache.get(
                        key, lambda: _train_run(cfg, variant, ages, n_vol, seed, manifest, samples)
                    )
                    if status != "ok":
                        failed = True
                        continue
                    policy = token_policy(ages)
                    for a in cfg.test_ages:
                        _, means = evaluate(result, test_sets[a], policy)
                        per_age[a].append(means[a])
                for a in cfg.test_ages:
                    rows.append(ReportRow(variant.name, label, AGES[a].name, per_age[a], "failed" if failed else "ok"))
                if cfg.kind == "data_scaling" and not failed:
                    pooled = [np.mean([per_age[a][r] for a in cfg.test_ages]) for r in range(len(cfg.seeds))]
                    series.append((variant.name, n_vol, float(np.mean(pooled))))
    return StudyReport(cfg.name, cfg.kind, rows, series)


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def emit_report(report: StudyReport, out_dir) -> list[Path]:
    """Write ``<name>.csv`` and, for data-scaling studies, ``<name>_scaling.csv``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    paths = [out / f"{report.name}.csv"]
    with paths[0].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([r.variant, r.train_cohort, r.test_age, _fmt(r.mean_dice), _fmt(r.sd), r.n_runs, r.status])
    if report.kind == "data_scaling":
        paths.append(out / f"{report.name}_scaling.csv")
        with paths[1].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCALING_COLUMNS)
            for variant, n_vol, dice in report.series:
                w.writerow([variant, n_vol, _fmt(dice)])
    return paths
