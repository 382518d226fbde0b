"""ConUNETR: a ViT encoder conditioned on age tokens and slice location, with a
convolutional U-Net-style decoder. Also hosts the small U-Net baseline."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .nn import ConvBlock, Conv2d, ConvTranspose2d, Linear, Module, Parameter, TransformerBlock, UpBlock
from .tensor import Tensor

CONDITIONING_MODES = ("none", "age_embedding", "age_token")
SPATIAL_MODES = ("none", "sinusoid", "learnable")
MAX_LOC = 100
SKIP_STAGES = (2, 3, 5)

IntOrSeq = Union[int, Sequence[int], np.ndarray]


@dataclass
class ModelConfig:
    img_size: int = 512
    in_channels: int = 1
    patch_size: int = 16
    d_model: int = 256
    stages: int = 6
    heads: int = 4
    num_classes: int = 2
    k_ages: int = 3
    conditioning_mode: str = "age_token"
    spatial_mode: str = "sinusoid"
    decoder_channels: tuple = (320, 128, 64, 32)
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.validate()

    def validate(self) -> None:
        P, H = self.patch_size, self.img_size
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(f"conditioning_mode must be one of {CONDITIONING_MODES}")
        if self.spatial_mode not in SPATIAL_MODES:
            raise ValueError(f"spatial_mode must be one of {SPATIAL_MODES}")
        if P < 2 or P & (P - 1) or P > 16:
            raise ValueError(f"patch_size must be a power of two in [2, 16], got {P}")
        if H % P:
            raise ValueError(f"img_size={H} is not divisible by patch_size={P}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoid pairing")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.stages != 6:
            raise ValueError("the encoder has exactly 6 stages (skip taps at 2, 3, 5 and 6)")
        if len(self.decoder_channels) != 4:
            raise ValueError("decoder_channels needs 4 widths, deepest first")
        if self.conditioning_mode != "none" and self.k_ages < 1:
            raise ValueError("k_ages must be >= 1 when conditioning is active")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + (1 if self.conditioning_mode == "age_token" else 0)

    def stage_resolutions(self) -> list[int]:
        """Spatial extent after each of the 4 decoder stages.

        The bottleneck doubles the token grid; every later stage doubles again
        until the image size is reached.
        """
        res = [2 * self.grid]
        for _ in range(3):
            res.append(min(2 * res[-1], self.img_size))
        return res

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class UNetConfig:
    img_size: int = 512
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 32
    depth: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.img_size % (2**self.depth):
            raise ValueError(f"img_size={self.img_size} must be divisible by 2**depth={2**self.depth}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


PRESETS = {
    "tiny": dict(img_size=64, patch_size=16, d_model=32, heads=4, decoder_channels=(32, 16, 16, 8)),
    "desk": dict(img_size=128, patch_size=16, d_model=64, heads=4, decoder_channels=(48, 32, 16, 16)),
    "paper-full": dict(img_size=512, patch_size=16, d_model=256, heads=4, decoder_channels=(320, 128, 64, 32)),
}

UNET_PRESETS = {
    "tiny": dict(img_size=64, base_width=8),
    "desk": dict(img_size=128, base_width=8),
    "paper-full": dict(img_size=512, base_width=32),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def unet_preset_config(name: str, **overrides) -> UNetConfig:
    if name not in UNET_PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(UNET_PRESETS)}")
    return UNetConfig(**{**UNET_PRESETS[name], **overrides})


# -- conditioning primitives ----------------------------------------------------
def spatial_encoding(loc: int, d_model: int) -> np.ndarray:
    """Sinusoid encoding of a slice location in ``[1, 100]``.

    Entry ``2i`` is ``sin(loc / 10000**(2i/d_model))`` and entry ``2i+1`` the
    matching cosine, so wavelengths run geometrically from 2*pi to 10000*2*pi.
    """
    if not 1 <= loc <= MAX_LOC:
        raise ValueError(f"slice location must lie in [1, {MAX_LOC}], got {loc}")
    if d_model % 2:
        raise ValueError("d_model must be even")
    i = np.arange(d_model // 2, dtype=np.float64)
    angle = loc / np.power(10000.0, 2 * i / d_model)
    out = np.empty(d_model, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def map_slice_location(slice_index: int, total_slices: int) -> int:
    """Map a slice index within its volume onto the location range 1..100."""
    if total_slices < 1:
        raise ValueError("total_slices must be >= 1")
    if not 0 <= slice_index < total_slices:
        raise ValueError(f"slice_index {slice_index} out of range for {total_slices} slices")
    if total_slices == 1:
        return 1
    return 1 + int(round(99 * slice_index / (total_slices - 1)))


def patch_embed(x: Tensor, proj: Linear, patch_size: int) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, N, d_model]``, patches in row-major order."""
    B, C, H, W = x.shape
    P = patch_size
    if H % P or W % P:
        raise ValueError(f"image {H}x{W} is not divisible into {P}x{P} patches")
    gh, gw = H // P, W // P
    patches = x.reshape(B, C, gh, P, gw, P).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * P * P)
    return proj(patches)


def compose_embeddings(
    patches: Tensor,
    pos: Tensor,
    e_sp: Optional[Tensor],
    age: Optional[Tensor],
    mode: str,
) -> Tensor:
    """Add position and spatial encodings to patch tokens and attach age information.

    ``patches`` is ``[B, N, d]``; ``pos`` is ``[N, d]``; ``e_sp`` and ``age``
    are ``[B, 1, d]`` (or None). In ``age_token`` mode the age vector becomes
    row 0 of an ``N + 1`` sequence; in ``age_embedding`` mode it is summed into
    every patch token.
    """
    e = patches + pos
    if e_sp is not None:
        e = e + e_sp
    if mode == "none":
        return e
    if age is None:
        raise ValueError(f"{mode} conditioning needs an age vector")
    if mode == "age_embedding":
        return e + age
    if mode == "age_token":
        return T.concat([age, e], axis=1)
    raise ValueError(f"unknown conditioning mode {mode!r}")


def strip_condition_token(z: Tensor, mode: str = "age_token") -> Tensor:
    """Drop row 0 (the age token) of ``[B, N+1, d]``."""
    if mode != "age_token":
        raise ValueError("strip_condition_token only applies in age_token mode")
    return T.slice_axis(z, 1, 1, z.shape[1])


def tokens_to_grid(z: Tensor, grid: int) -> Tensor:
    B, N, d = z.shape
    if N != grid * grid:
        raise ValueError(f"{N} tokens do not form a {grid}x{grid} grid")
    return z.reshape(B, grid, grid, d).transpose(0, 3, 1, 2)


def _broadcast_ids(v: IntOrSeq, B: int, what: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=np.int64))
    if arr.size == 1:
        arr = np.repeat(arr, B)
    if arr.shape != (B,):
        raise ValueError(f"{what} must be a scalar or have one entry per batch item ({B})")
    return arr


class SkipProjection(Module):
    """Token grid -> feature map by repeated (x2 deconvolution, conv block) units."""

    def __init__(self, d_model: int, channels: int, n_up: int, rng: np.random.Generator):
        self.ups = []
        self.blocks = []
        cin = d_model
        for _ in range(n_up):
            self.ups.append(ConvTranspose2d(cin, channels, rng))
            self.blocks.append(ConvBlock(channels, channels, rng))
            cin = channels

    def forward(self, x: Tensor) -> Tensor:
        for up, block in zip(self.ups, self.blocks):
            x = block(up(x))
        return x


class ConUNETR(Module):
    """Conditional UNETR-style segmentation network.

    Calling the model returns per-pixel class probabilities
    ``[B, num_classes, H, W]``; :meth:`logits` returns the pre-softmax map.
    """

    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        d, P = cfg.d_model, cfg.patch_size
        self.patch_proj = Linear(cfg.in_channels * P * P, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.num_patches, d)))
        if cfg.spatial_mode == "learnable":
            self.spatial_table = Parameter(rng.normal(0.0, 0.02, size=(MAX_LOC, d)))
        if cfg.conditioning_mode == "age_token":
            self.age_tokens = Parameter(rng.normal(0.0, 0.02, size=(cfg.k_ages, d)))
        elif cfg.conditioning_mode == "age_embedding":
            self.age_embedding = Parameter(rng.normal(0.0, 0.02, size=(cfg.k_ages, d)))
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.stages)]

        c0, c1, c2, c3 = cfg.decoder_channels
        res = cfg.stage_resolutions()
        if res[-1] != cfg.img_size:
            raise ValueError("decoder cannot reach full resolution for this patch size")
        grid = cfg.grid
        self.bottleneck = ConvTranspose2d(d, c0, rng)
        # z5 -> stage 1, z3 -> stage 2, z2 -> stage 3
        self.skip5 = SkipProjection(d, c0, int(math.log2(res[0] // grid)), rng)
        self.skip3 = SkipProjection(d, c1, int(math.log2(res[1] // grid)), rng)
        self.skip2 = SkipProjection(d, c2, int(math.log2(res[2] // grid)), rng)
        self.dec1 = UpBlock(c0, c0, c0, rng, upsample=False)
        self.dec2 = UpBlock(c0, c1, c1, rng, upsample=res[1] > res[0])
        self.dec3 = UpBlock(c1, c2, c2, rng, upsample=res[2] > res[1])
        self.dec4 = UpBlock(c2, 0, c3, rng, upsample=res[3] > res[2])
        self.head = Conv2d(c3, cfg.num_classes, 1, rng)

    # -- encoder side ------------------------------------------------------------
    def spatial_vectors(self, loc: IntOrSeq, B: int) -> Optional[Tensor]:
        cfg = self.config
        locs = _broadcast_ids(loc, B, "loc")
        if np.any((locs < 1) | (locs > MAX_LOC)):
            raise ValueError(f"slice locations must lie in [1, {MAX_LOC}], got {locs.tolist()}")
        if cfg.spatial_mode == "none":
            return None
        if cfg.spatial_mode == "sinusoid":
            table = np.stack([spatial_encoding(int(l), cfg.d_model) for l in locs])
            return Tensor(table.reshape(B, 1, cfg.d_model))
        return T.take_rows(self.spatial_table, locs - 1).reshape(B, 1, cfg.d_model)

    def age_vectors(self, age_id: IntOrSeq, B: int) -> Optional[Tensor]:
        cfg = self.config
        if cfg.conditioning_mode == "none":
            return None
        if age_id is None:
            raise ValueError(f"{cfg.conditioning_mode} conditioning needs an age id")
        ids = _broadcast_ids(age_id, B, "age_id")
        if np.any((ids < 0) | (ids >= cfg.k_ages)):
            raise ValueError(f"age ids {ids.tolist()} out of range for k_ages={cfg.k_ages}")
        table = self.age_tokens if cfg.conditioning_mode == "age_token" else self.age_embedding
        return T.take_rows(table, ids).reshape(B, 1, cfg.d_model)

    def embed(self, image: Tensor, age_id: IntOrSeq = None, loc: IntOrSeq = 1) -> Tensor:
        """Build the encoder input ``z0``."""
        cfg = self.config
        if not isinstance(image, Tensor):
            image = Tensor(image)
        B, C, H, W = image.shape
        if C != cfg.in_channels or H != cfg.img_size or W != cfg.img_size:
            raise ValueError(
                f"model expects [B, {cfg.in_channels}, {cfg.img_size}, {cfg.img_size}], got {image.shape}"
            )
        patches = patch_embed(image, self.patch_proj, cfg.patch_size)
        return compose_embeddings(
            patches, self.pos, self.spatial_vectors(loc, B), self.age_vectors(age_id, B), cfg.conditioning_mode
        )

    def encode(self, image: Tensor, age_id: IntOrSeq = None, loc: IntOrSeq = 1) -> list[Tensor]:
        """Return the six stage outputs ``[z1, ..., z6]``."""
        z = self.embed(image, age_id, loc)
        outs = []
        for block in self.blocks:
            z = block(z)
            outs.append(z)
        return outs

    # -- decoder side ------------------------------------------------------------
    def decode(self, zs: Sequence[Tensor]) -> Tensor:
        """Logits from encoder stage outputs; row 0 is dropped in token mode."""
        cfg = self.config
        strip = cfg.conditioning_mode == "age_token"

        def grid_of(stage: int) -> Tensor:
            z = zs[stage - 1]
            if strip:
                z = strip_condition_token(z)
            return tokens_to_grid(z, cfg.grid)

        x = self.bottleneck(grid_of(6))
        x = self.dec1(x, self.skip5(grid_of(5)))
        x = self.dec2(x, self.skip3(grid_of(3)))
        x = self.dec3(x, self.skip2(grid_of(2)))
        x = self.dec4(x)
        return self.head(x)

    def logits(self, image: Tensor, age_id: IntOrSeq = None, loc: IntOrSeq = 1) -> Tensor:
        return self.decode(self.encode(image, age_id, loc))

    def forward(self, image: Tensor, age_id: IntOrSeq = None, loc: IntOrSeq = 1) -> Tensor:
        return T.softmax(self.logits(image, age_id, loc), axis=1)


class UNet(Module):
    """Plain 4-down / 4-up U-Net; conditioning arguments are accepted and ignored."""

    def __init__(self, config: UNetConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.down = []
        cin = cfg.in_channels
        for w in widths[:-1]:
            self.down.append(ConvBlock(cin, w, rng))
            cin = w
        self.bottom = ConvBlock(widths[-2], widths[-1], rng)
        self.up = [UpBlock(widths[i + 1], widths[i], widths[i], rng) for i in reversed(range(cfg.depth))]
        self.head = Conv2d(widths[0], cfg.num_classes, 1, rng)

    def logits(self, image: Tensor, age_id: IntOrSeq = None, loc: IntOrSeq = 1) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(image)
        H, W = image.shape[2:]
        if H % 2**self.config.depth or W % 2**self.config.depth:
            raise ValueError(f"image {H}x{W} not divisible by 2**{self.config.depth}")
        skips = []
        x = image
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = T.max_pool2d(x, 2)
        x = self.bottom(x)
        for up, skip in zip(self.up, reversed(skips)):
            x = up(x, skip)
        return self.head(x)

    def forward(self, image: Tensor, age_id: IntOrSeq = None, loc: IntOrSeq = 1) -> Tensor:
        return T.softmax(self.logits(image, age_id, loc), axis=1)


def build_model(config: Union[ModelConfig, UNetConfig]) -> Module:
    if isinstance(config, UNetConfig):
        return UNet(config)
    return ConUNETR(config)


def count_parameters(model: Module) -> dict:
    """Learnable element counts per top-level component plus ``total``."""
    counts: dict = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts
