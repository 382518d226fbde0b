"""Finite-difference gradient suite for every differentiable op and the model.

Each op is reduced to a scalar with a fixed random projection
``sum(op(x) * R)`` so every output element contributes. Two kinds of check
run:

* 32-bit: the analytic gradient computed in float32 is compared with central
  differences of the same function evaluated in float64.
* 64-bit: analytic and numeric gradients both in float64 (elementwise ops).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_model, preset_config
from .tensor import Tensor

TOL_32 = 1e-3
TOL_64 = 1e-6


@dataclass
class CheckResult:
    name: str
    precision: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> float:
    """Worst ``|a - n| / max(|a|, |n|, floor)``."""
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _numeric(f64: Callable[[list], float], arrays: list, which: int, coords, step: float) -> np.ndarray:
    flat = arrays[which].reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = f64(arrays)
        flat[i] = orig - step
        fm = f64(arrays)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * step)
    return out


def check_op(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    precision: str = "32",
    seed: int = 0,
    step: float = 1e-6,
    max_coords: int = 64,
) -> CheckResult:
    """Gradient check of ``fn(*tensors)`` with respect to every input."""
    rng = np.random.default_rng(seed)
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    dtype = np.float32 if precision == "32" else np.float64
    with T.no_grad(), T.float64():
        proj = rng.normal(size=fn(*[Tensor(x) for x in base]).shape)

    def loss(tensors):
        out = fn(*tensors)
        return (out * Tensor(proj, dtype=out.dtype)).sum()

    ts = [Tensor(x.astype(dtype), requires_grad=True, dtype=dtype) for x in base]
    prev = T.get_default_dtype()
    T.set_default_dtype(dtype)
    try:
        loss(ts).backward()
    finally:
        T.set_default_dtype(prev)

    def f64(arrays):
        with T.no_grad(), T.float64():
            return float(loss([Tensor(a) for a in arrays]).data)

    worst = 0.0
    work = [x.copy() for x in base]
    for which, t in enumerate(ts):
        coords = np.arange(t.size)
        if t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        analytic = (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)[coords].astype(np.float64)
        worst = max(worst, _rel_err(analytic, _numeric(f64, work, which, coords, step)))
    return CheckResult(name, precision, worst, TOL_32 if precision == "32" else TOL_64)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_suite(seed: int = 0) -> list[tuple[str, Callable, list, bool]]:
    """``(name, fn, inputs, elementwise)`` for every differentiable op."""
    rng = np.random.default_rng(seed)
    n = lambda *s: rng.normal(size=s)
    pool_in = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1
    return [
        ("add", lambda a, b: a + b, [n(3, 4), n(4)], True),
        ("sub", lambda a, b: a - b, [n(3, 4), n(3, 1)], True),
        ("mul", lambda a, b: a * b, [n(3, 4), n(3, 4)], True),
        ("neg", lambda a: -a, [n(5)], True),
        ("scale", lambda a: T.scale(a, 2.5), [n(5)], True),
        ("div_scalar", lambda a: a / 3.0, [n(5)], True),
        ("exp", T.exp, [n(3, 4)], True),
        ("relu", T.relu, [_away_from_zero(rng, (3, 4))], True),
        ("gelu", T.gelu, [n(3, 4)], True),
        ("sum", lambda a: a.sum(axis=1), [n(3, 4)], False),
        ("mean", lambda a: a.mean(axis=0), [n(3, 4)], False),
        ("reshape", lambda a: a.reshape(4, 3), [n(3, 4)], False),
        ("transpose", lambda a: a.transpose(1, 0, 2), [n(2, 3, 4)], False),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [n(2, 3), n(2, 2)], False),
        ("slice", lambda a: T.slice_axis(a, 1, 1, 3), [n(2, 4)], False),
        ("getitem", lambda a: a[:, [0, 2, 2]], [n(3, 4)], False),
        ("take_rows", lambda t: T.take_rows(t, np.array([2, 0, 2])), [n(4, 3)], False),
        ("matmul", lambda a, b: a @ b, [n(2, 3, 4), n(4, 5)], False),
        ("matmul_batched", lambda a, b: a @ b, [n(2, 3, 4), n(2, 4, 2)], False),
        ("softmax", lambda a: T.softmax(a, axis=-1), [n(3, 5)], False),
        ("log_softmax", lambda a: T.log_softmax(a, axis=1), [n(2, 2, 3, 3)], False),
        ("layer_norm", lambda x, w, b: T.layer_norm(x, w, b), [n(3, 8), n(8), n(8)], False),
        ("group_norm", lambda x, w, b: T.group_norm(x, 2, w, b), [n(2, 4, 3, 3), n(4), n(4)], False),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), [n(2, 3, 5, 5), n(4, 3, 3, 3), n(4)], False),
        ("conv2d_stride2", lambda x, w: T.conv2d(x, w, stride=2, padding=0), [n(1, 2, 6, 6), n(3, 2, 2, 2)], False),
        ("conv_transpose2d", lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2), [n(2, 3, 3, 3), n(3, 2, 2, 2), n(2)], False),
        ("max_pool2d", lambda x: T.max_pool2d(x, 2), [pool_in], False),
    ]


def run_op_checks(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn, inputs, elementwise in op_suite(seed):
        results.append(check_op(name, fn, inputs, "32", seed))
        if elementwise:
            results.append(check_op(name, fn, inputs, "64", seed))
    return results


@contextlib.contextmanager
def _relu_margin_probe(record: list):
    """Record the smallest |input| seen by any ReLU inside the block."""
    original = T.relu

    def probe(a):
        record.append(float(np.min(np.abs(a.data))))
        return original(a)

    T.relu = probe
    try:
        yield
    finally:
        T.relu = original


def check_model(
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    coords_per_param: int = 2,
    step: float = 1e-6,
    floor: float = 1e-6,
    kink_margin: float = 1e-5,
    max_draws: int = 100,
) -> CheckResult:
    """Gradient check of the full model's loss w.r.t. sampled coordinates of
    every parameter tensor (analytic float32 vs numeric float64).

    ReLU kinks are dense in a full network, so the input batch is redrawn
    until every ReLU input is at least ``kink_margin`` away from zero (the
    float32 and float64 passes then agree on every activation pattern) and
    the step is kept well below that margin. Gradients below
    ``floor`` are compared in absolute terms, which covers entries that
    vanish identically (key-projection biases cancel inside the softmax).
    """
    from .training import cross_entropy_loss

    config = config or preset_config("tiny")
    model = build_model(config)
    B, H = 2, config.img_size
    ages = np.arange(B) % getattr(config, "k_ages", 1)
    locs = np.array([1, 100])[:B]
    for draw in range(max_draws):
        rng = np.random.default_rng([seed, draw])
        image = rng.uniform(0, 1, size=(B, config.in_channels, H, H))
        margins: list = []
        with _relu_margin_probe(margins), T.no_grad():
            model.logits(Tensor(image), ages, locs)
        if min(margins, default=np.inf) >= kink_margin:
            break
    else:
        raise RuntimeError(f"no input batch kept ReLU inputs {kink_margin} away from zero in {max_draws} draws")
    mask = (rng.uniform(size=(B, H, H)) < 0.3).astype(np.int64)

    def loss():
        return cross_entropy_loss(model.logits(Tensor(image), ages, locs), mask)

    named = list(model.named_parameters())
    model.zero_grad()
    loss().backward()
    grads = {name: p.grad.copy() for name, p in named}
    originals = {name: p.data for name, p in named}
    worst = 0.0
    try:
        for name, p in named:
            p.data = originals[name].astype(np.float64)
        for name, p in named:
            flat = p.data.reshape(-1)
            coords = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
            for i in coords:
                orig = flat[i]
                with T.no_grad(), T.float64():
                    flat[i] = orig + step
                    fp = float(loss().data)
                    flat[i] = orig - step
                    fm = float(loss().data)
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                worst = max(worst, _rel_err(np.array([grads[name].reshape(-1)[i]], np.float64), np.array([num]), floor))
    finally:
        for name, p in named:
            p.data = originals[name]
    return CheckResult("model", "32", worst, TOL_32)


def format_table(results: Sequence[CheckResult]) -> str:
    lines = [f"{'op':<18} {'bits':>4} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<18} {r.precision:>4} {r.max_rel_err:>12.3e} {r.tol:>8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
