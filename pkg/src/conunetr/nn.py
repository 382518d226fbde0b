"""Neural network layers built on :mod:`conunetr.tensor`."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A learnable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _uniform(rng: np.random.Generator, shape, bound: float) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """``y = x W + b`` with ``W`` of shape ``[in, out]``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / math.sqrt(in_features)
        self.weight = _uniform(rng, (in_features, out_features), bound)
        self.bias = _uniform(rng, (out_features,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"Linear expects last extent {self.in_features}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(features))
        self.shift = Parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, self.eps)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over the token axis of ``[B, T, d]``.

    The most recent attention weights are kept in ``last_weights``
    (``[B, heads, T, T]``) for inspection.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor, B: int, n: int) -> Tensor:
        return x.reshape(B, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        B, n, d = x.shape
        if d != self.d_model:
            raise ValueError(f"attention expects d_model={self.d_model}, got {d}")
        q = self._split(self.q_proj(x), B, n)
        k = self._split(self.k_proj(x), B, n)
        v = self._split(self.v_proj(x), B, n)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, n, d)
        out = self.out_proj(ctx)
        return out.reshape(n, d) if squeeze else out


class TransformerBlock(Module):
    """Pre-norm encoder block: ``x + attn(norm1(x))`` then ``+ mlp(norm2(.))``."""

    def __init__(self, d_model: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.fc1 = Linear(d_model, mlp_ratio * d_model, rng)
        self.fc2 = Linear(mlp_ratio * d_model, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


def norm_groups(channels: int) -> int:
    """Groups of 8 channels where possible, otherwise one group."""
    return channels // 8 if channels % 8 == 0 else 1


class GroupNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.groups = norm_groups(channels)
        self.eps = eps
        self.gain = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gain, self.shift, self.eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, padding: int = 0, stride: int = 1):
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = _uniform(rng, (cout, cin, k, k), bound)
        self.bias = _uniform(rng, (cout,), bound)
        self.padding = padding
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Exact x2 (or x``k``) upsampling deconvolution, kernel = stride."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 2):
        bound = 1.0 / math.sqrt(cout * stride * stride)
        self.weight = _uniform(rng, (cin, cout, stride, stride), bound)
        self.bias = _uniform(rng, (cout,), bound)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class ConvBlock(Module):
    """(3x3 conv, pad 1 -> group norm -> ReLU) x 2."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng, padding=1)
        self.norm1 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1)
        self.norm2 = GroupNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.norm1(self.conv1(x)))
        return T.relu(self.norm2(self.conv2(x)))


class UpBlock(Module):
    """Optional x2 deconvolution, channel concat with a skip, then a conv block.

    With ``upsample=False`` the input is concatenated at its own resolution.
    """

    def __init__(self, cin: int, skip_ch: int, cout: int, rng: np.random.Generator, upsample: bool = True):
        self.upsample = upsample
        self.skip_ch = skip_ch
        if upsample:
            self.up = ConvTranspose2d(cin, cout, rng)
            merged = cout + skip_ch
        else:
            self.up = None
            merged = cin + skip_ch
        self.block = ConvBlock(merged, cout, rng)

    def forward(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        if self.up is not None:
            x = self.up(x)
        if skip is not None:
            if skip.shape[2:] != x.shape[2:]:
                raise ValueError(f"skip extent {skip.shape[2:]} does not match decoder extent {x.shape[2:]}")
            x = T.concat([x, skip], axis=1)
        elif self.skip_ch:
            raise ValueError("this stage expects a skip feature map")
        return self.block(x)
