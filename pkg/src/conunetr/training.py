"""Loss, AdamW, cosine annealing and the training loop."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SliceSample
from .model import map_slice_location
from .nn import Module, Parameter
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "mean_loss", "lr", "wall_seconds")
NO_DECAY_TABLES = ("pos", "age_tokens", "age_embedding", "spatial_table")


class TrainingDiverged(RuntimeError):
    pass


def cross_entropy_loss(logits: Tensor, mask) -> Tensor:
    """Mean per-pixel cross-entropy of ``[B, 2, H, W]`` logits against a
    ``[B, H, W]`` label map, via log-softmax."""
    mask = np.asarray(mask)
    if logits.ndim != 4 or mask.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"logits {logits.shape} and mask {mask.shape} do not line up")
    C = logits.shape[1]
    if mask.size and (mask.min() < 0 or mask.max() >= C):
        raise ValueError(f"class labels must lie in [0, {C - 1}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, mask[:, None].astype(np.int64), 1.0, axis=1)
    picked = (T.log_softmax(logits, axis=1) * Tensor(onehot, dtype=logits.dtype)).sum()
    return picked * (-1.0 / (mask.size))


@dataclass
class ScheduleConfig:
    lr_init: float = 1e-4
    lr_min: float = 0.0
    total_epochs: int = 700

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    # endpoints returned directly: lr_min + (lr_init - lr_min) can round off lr_init
    if epoch == 0:
        return cfg.lr_init
    if epoch == cfg.total_epochs:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))


def default_decay_filter(name: str) -> bool:
    """Weight decay applies to everything except norm gains/shifts and the
    position / age / spatial tables."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("gain", "shift") and name not in NO_DECAY_TABLES


class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks decayed parameters by ``1 - lr * weight_decay`` and
    then applies the bias-corrected Adam update. A parameter without a
    gradient is treated as having a zero gradient, so every parameter is
    visited once per step.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, Parameter]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-3,
        decay_filter: Callable[[str], bool] = default_decay_filter,
    ):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decays = {name: decay_filter(name) for name, _ in self.params}
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0
        self.last_update_count = 0

    def hyperparameters(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        count = 0
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
            dt = p.data.dtype.type
            if self.decays[name] and self.weight_decay:
                p.data *= dt(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * (g * g)
            p.data -= dt(lr) * ((m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps)))
            count += 1
        self.last_update_count = count

    def load_moments(self, moments: dict) -> None:
        self.t = int(moments["t"])
        for name, p in self.params:
            self.m[name] = moments["m"][name].astype(p.data.dtype)
            self.v[name] = moments["v"][name].astype(p.data.dtype)


def adamw_step(optimizer: AdamW, lr_t: float) -> None:
    optimizer.step(lr_t)


@dataclass
class TrainRunConfig:
    epochs: int = 700
    batch_size: int = 45
    crop_size: Optional[int] = None
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional dependency
        yield
        return
    with threadpool_limits(limits=1):
        yield


def make_batch(samples: Sequence[SliceSample], token_map: Optional[dict] = None):
    images = np.stack([s.image for s in samples]).astype(T.get_default_dtype())
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    ages = np.array([token_map[s.age_id] if token_map else s.age_id for s in samples], dtype=np.int64)
    locs = np.array([map_slice_location(s.slice_index, s.total_slices) for s in samples], dtype=np.int64)
    return Tensor(images), masks, ages, locs


def _model_size(model: Module) -> int:
    return model.config.img_size


def train(
    model: Module,
    dataset: Sequence[SliceSample],
    run_cfg: TrainRunConfig,
    schedule: ScheduleConfig,
    optimizer: AdamW,
    out_dir=None,
    token_map: Optional[dict] = None,
    start_epoch: int = 0,
    meta: Optional[dict] = None,
) -> list[dict]:
    """Train ``model`` on annotated slices and return the per-epoch log.

    Shuffling and augmentation draw from generators seeded by
    ``(seed, epoch[, sample])``, so a run resumed at any epoch boundary
    replays the uninterrupted run exactly. When ``out_dir`` is given the log
    is appended to ``train_log.csv`` and checkpoints are written there;
    ``meta`` is stored alongside the epoch in every checkpoint.
    """
    if not dataset:
        raise ValueError("training set is empty")
    size = run_cfg.crop_size or dataset[0].mask.shape[0]
    if size != _model_size(model):
        raise ValueError(f"model expects {_model_size(model)}px inputs but training crops are {size}px")
    if run_cfg.crop_size is None and any(s.mask.shape != (size, size) for s in dataset):
        raise ValueError("slices must be square and match the model size when no crop is configured")
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if start_epoch == 0 or not log_path.exists():
            with log_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)
    aug_cfg = run_cfg.augment
    if run_cfg.crop_size is not None:
        aug_cfg = AugmentConfig(**{**vars(aug_cfg), "crop_size": run_cfg.crop_size})

    records = []
    with deterministic_mode(run_cfg.deterministic):
        for epoch in range(start_epoch, run_cfg.epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(epoch, schedule)
            order = np.random.default_rng([run_cfg.seed, epoch]).permutation(len(dataset))
            total, seen = 0.0, 0
            for b, start in enumerate(range(0, len(order), run_cfg.batch_size)):
                idx = order[start : start + run_cfg.batch_size]
                batch = [augment(dataset[i], aug_cfg, [run_cfg.seed, epoch, int(i)])[0] for i in idx]
                images, masks, ages, locs = make_batch(batch, token_map)
                logits = model.logits(images, ages, locs)
                loss = cross_entropy_loss(logits, masks)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b}; max |logit| = {np.abs(logits.data).max()}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step(lr)
                total += value * len(idx)
                seen += len(idx)
            rec = {"epoch": epoch, "mean_loss": total / seen, "lr": lr, "wall_seconds": time.perf_counter() - t0}
            records.append(rec)
            log.debug("epoch %d loss %.5f lr %.3g", epoch, rec["mean_loss"], lr)
            if log_path is not None:
                with log_path.open("a", newline="") as fh:
                    csv.writer(fh).writerow([epoch, repr(rec["mean_loss"]), repr(lr), f"{rec['wall_seconds']:.3f}"])
            done = epoch + 1
            if out is not None and run_cfg.checkpoint_every and done % run_cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{done}.bin", model, optimizer, {**(meta or {}), "epoch": done})
    if out is not None:
        save_checkpoint(out / "final.bin", model, optimizer, {**(meta or {}), "epoch": run_cfg.epochs})
    return records


def resume(
    checkpoint_path,
    dataset: Sequence[SliceSample],
    run_cfg: TrainRunConfig,
    schedule: ScheduleConfig,
    out_dir=None,
    token_map: Optional[dict] = None,
    weight_decay: Optional[float] = None,
) -> tuple[Module, AdamW, list[dict]]:
    """Continue a run from a checkpoint that carries optimizer state."""
    from .checkpoint import read_checkpoint

    rec = read_checkpoint(checkpoint_path)
    hp = rec["optimizer"] or {}
    model, meta = load_checkpoint(checkpoint_path)
    opt = AdamW(
        model.named_parameters(),
        lr=hp.get("lr", schedule.lr_init),
        betas=tuple(hp.get("betas", (0.9, 0.999))),
        eps=hp.get("eps", 1e-8),
        weight_decay=hp.get("weight_decay", 1e-3) if weight_decay is None else weight_decay,
    )
    load_checkpoint(checkpoint_path, model, opt)
    start = int(meta.pop("epoch"))
    records = train(model, dataset, run_cfg, schedule, opt, out_dir, token_map, start_epoch=start, meta=meta)
    return model, opt, records
