"""Dense tensors with reverse-mode automatic differentiation.

Every operation executed on a tensor that requires gradients appends a node
to an implicit computation record: the output keeps references to its inputs
and a closure that maps the upstream gradient to input gradients.
:meth:`Tensor.backward` orders that record topologically, replays it in
reverse exactly once per node, accumulates gradients on leaves and then
releases the record.

All data lives in numpy arrays. The default precision is float32; the
:func:`float64` context switches newly created tensors to float64, which is
what the gradient checks use.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "create",
    "zeros",
    "get_default_dtype",
    "set_default_dtype",
    "float64",
    "no_grad",
    "is_grad_enabled",
    "check_finite",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "elementwise",
    "matmul",
    "relu",
    "gelu",
    "exp",
    "softmax",
    "log_softmax",
    "layer_norm",
    "group_norm",
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "take_rows",
    "finite_diff_gradcheck",
]

Array = np.ndarray
Operand = Union["Tensor", float, int]

_state = {"dtype": np.float32, "grad": True, "check_finite": False}


class NonFiniteError(FloatingPointError):
    """Raised by an operation producing NaN/Inf while finite checking is on."""


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def float64() -> Iterator[None]:
    """Create tensors in 64-bit precision inside the block (gradient checking)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Fail fast with :class:`NonFiniteError` when any op output is not finite."""
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``grad`` is a plain numpy array of the same shape as ``data`` (or None).
    Gradients accumulate across backward calls until :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: Array = np.asarray(data, dtype=dtype or _state["dtype"])
        if self.data.ndim > 0 and 0 in self.data.shape:
            raise ValueError(f"every extent must be >= 1, got shape {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[Array], tuple]] = None
        self._op: Optional[str] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{op})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[Array] = None) -> None:
        """Back-propagate from this scalar through the recorded computation."""
        if grad is None and self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._backward is None:
            raise RuntimeError(
                "backward called on a tensor outside any computation record "
                "(a leaf, or a record already consumed)"
            )
        order = _topological_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
        grads: dict = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return add(neg(self), other)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return scale(_sum(self, axis, keepdims), 1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._backward is not None):
                stack.append((p, False))
    return order


def _result(data: Array, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x: Operand, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (a, b) in enumerate(zip(shape, g.shape)) if a == 1 and b != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- creation ---------------------------------------------------------------
def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def create(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    value: float = 0.0,
    low: float = 0.0,
    high: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    values=None,
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
    requires_grad: bool = False,
) -> Tensor:
    """Build a tensor of ``shape`` from one of the supported initialisers.

    ``init`` is one of ``zeros``, ``constant``, ``uniform``, ``normal`` or
    ``values``. Random initialisers draw from ``rng`` (or a fresh generator
    seeded with ``seed``), so results are reproducible.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"every extent must be >= 1, got {shape}")
    dtype = _state["dtype"]
    if init in ("uniform", "normal") and rng is None:
        rng = np.random.default_rng(seed)
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        data = rng.uniform(low, high, size=shape).astype(dtype)
    elif init == "normal":
        data = rng.normal(mean, std, size=shape).astype(dtype)
    elif init == "values":
        flat = np.asarray(values, dtype=dtype).reshape(-1)
        if flat.size != math.prod(shape):
            raise ValueError(f"got {flat.size} values for shape {shape} ({math.prod(shape)} elements)")
        data = flat.reshape(shape)
    else:
        raise ValueError(f"unknown initialiser {init!r}")
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return create(shape, "zeros", requires_grad=requires_grad)


# -- elementwise ----------------------------------------------------------
def add(a: Tensor, b: Operand) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Operand) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def elementwise(op: str, a: Tensor, b: Operand = None) -> Tensor:
    """Dispatch ``add | sub | mul | scale | neg`` by name."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "neg":
        return neg(a)
    raise ValueError(f"unknown elementwise op {op!r}")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    half = x.dtype.type(0.5)
    out = half * x * (1 + t)

    def backward(g):
        d = half * (1 + t) + half * x * (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * d,)

    return _result(out, (a,), backward, "gelu")


# -- reductions and shape ops -----------------------------------------------
def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError(f"cannot reshape {src} ({a.size} elements) into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ValueError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ValueError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(out, tuple(tensors), backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if not 0 <= start < stop <= a.shape[axis]:
        raise ValueError(f"slice [{start}:{stop}] out of range for extent {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return _getitem(a, tuple(idx))


def _getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), backward, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (gradient flows only into selected rows)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row ids {ids.tolist()} out of range for {table.shape[0]} rows")
    return _getitem(table, ids)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules (both operands rank >= 2)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


# -- normalisation / probability ------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and shift."""
    k = x.shape[-1]
    if gain.shape != (k,) or shift.shape != (k,):
        raise ValueError(f"layer_norm: gain/shift must have shape ({k},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + shift.data

    def backward(g):
        gx = gg = gs = None
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if shift.requires_grad:
            gs = g.sum(axis=lead)
        if x.requires_grad:
            dxh = g * gd
            gx = inv * (
                dxh
                - dxh.mean(axis=-1, keepdims=True)
                - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gs

    return _result(out, (x, gain, shift), backward, "layer_norm")


def group_norm(x: Tensor, groups: int, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of ``[B, C, H, W]`` over (channels-in-group, H, W)."""
    B, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    xd = x.data.reshape(B, groups, -1)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xc * inv).reshape(B, C, H, W)
    gd = gain.data.reshape(1, C, 1, 1)
    out = xhat * gd + shift.data.reshape(1, C, 1, 1)

    def backward(g):
        gx = gg = gs = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if shift.requires_grad:
            gs = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxh = (g * gd).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (
                dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True)
            )
            gx = gx.reshape(B, C, H, W)
        return gx, gg, gs

    return _result(out, (x, gain, shift), backward, "group_norm")


# -- convolution ------------------------------------------------------------------
def _conv_out(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d: ({n} + 2*{padding} - {k}) / {stride} + 1 along {axis} is not a positive integer"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``[B, Cin, H, W]`` with ``[Cout, Cin, kh, kw]``.

    Computed channels-last as a sum over kernel taps of one GEMM each, which
    avoids materialising an im2col buffer.
    """
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if Cw != Cin:
        raise ValueError(f"conv2d: input has {Cin} channels, weight expects {Cw}")
    Ho = _conv_out(H, kh, stride, padding, "H")
    Wo = _conv_out(W, kw, stride, padding, "W")
    s = stride
    xn = x.data.transpose(0, 2, 3, 1)
    if padding:
        xn = np.pad(xn, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xn = np.ascontiguousarray(xn)
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # [kh, kw, Cin, Cout]

    def window(a, i, j):
        return a[:, i : i + s * Ho : s, j : j + s * Wo : s, :]

    out = None
    for i in range(kh):
        for j in range(kw):
            term = window(xn, i, j) @ wt[i, j]
            if out is None:
                out = term
            else:
                out += term
    if bias is not None:
        out += bias.data

    def backward(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gx = gw = gb = None
        if w.requires_grad:
            g2 = gn.reshape(-1, Cout)
            gwt = np.empty((kh, kw, Cin, Cout), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gwt[i, j] = window(xn, i, j).reshape(-1, Cin).T @ g2
            gw = np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = gn.reshape(-1, Cout).sum(axis=0)
        if x.requires_grad:
            gxp = np.zeros(xn.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += gn @ wt[i, j].T
            if padding:
                gxp = gxp[:, padding : padding + H, padding : padding + W, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return _result(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution for the exact-upsampling case ``kh == kw == stride``.

    ``w`` has shape ``[Cin, Cout, k, k]``; the output is ``[B, Cout, H*k, W*k]``.
    """
    B, Cin, H, W = x.shape
    Cw, Cout, kh, kw = w.shape
    if not kh == kw == stride:
        raise ValueError(f"conv_transpose2d supports kh == kw == stride only, got {kh}x{kw} stride {stride}")
    if Cw != Cin:
        raise ValueError(f"conv_transpose2d: input has {Cin} channels, weight expects {Cw}")
    k = stride
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, Cin)
    wm = w.data.reshape(Cin, Cout * k * k)
    y = (xm @ wm).reshape(B, H, W, Cout, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(B, Cout, H * k, W * k)
    if bias is not None:
        y = y + bias.data.reshape(1, Cout, 1, 1)

    def backward(g):
        gm = g.reshape(B, Cout, H, k, W, k).transpose(0, 2, 4, 1, 3, 5).reshape(-1, Cout * k * k)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gm @ wm.T).reshape(B, H, W, Cin).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if w.requires_grad:
            gw = (xm.T @ gm).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return _result(np.ascontiguousarray(y), parents, backward, "conv_transpose2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"max_pool2d: extents {H}x{W} not divisible by {k}")
    blocks = x.data.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _result(out, (x,), backward, "max_pool2d")


# -- verification ------------------------------------------------------------------
def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-6,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Worst relative error between the analytic gradient of ``f`` at ``x`` and
    central differences ``(f(x+h) - f(x-h)) / 2h``.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``. ``indices``
    restricts the check to some flat coordinates (all by default). ``x`` is
    perturbed in place and restored afterwards.
    """
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
