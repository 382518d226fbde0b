"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic  b"CONUNETR"
    u32    format version
    u32    length of the JSON header, then the header itself
           {"kind", "config", "meta", "optimizer"}
    u32    parameter count, then per parameter:
           u16 name length, utf-8 name, u8 rank, u32 extents..., float32 values
    u8     1 if optimizer moments follow, then for each parameter in the same
           order its first and second moment arrays (same encoding, no name)

Loading parses and validates the whole file before anything is assigned, so a
failed load leaves the target model untouched.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ConUNETR, ModelConfig, UNet, UNetConfig, build_model
from .nn import Module

MAGIC = b"CONUNETR"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: io.BytesIO, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def _read_array(f: io.BytesIO, what: str) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(f, 1, what))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, what))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(f, 4 * count, what), dtype="<f4")
    return data.reshape(shape).copy()


def model_kind(model: Module) -> str:
    return "unet" if isinstance(model, UNet) else "conunetr"


def save_checkpoint(path, model: Module, optimizer=None, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    named = list(model.named_parameters())
    header = {
        "kind": model_kind(model),
        "config": model.config.to_dict(),
        "meta": meta or {},
        "optimizer": optimizer.hyperparameters() if optimizer is not None else None,
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        _write_array(buf, p.data)
    if optimizer is not None:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", optimizer.t))
        for name, _ in named:
            _write_array(buf, optimizer.m[name])
            _write_array(buf, optimizer.v[name])
    else:
        buf.write(struct.pack("<B", 0))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    """Parse a checkpoint file into ``{"kind", "config", "meta", "optimizer",
    "params", "moments"}`` without touching any model."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    f = io.BytesIO(raw)
    if _read_exact(f, len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
    try:
        header = json.loads(_read_exact(f, hlen, "header"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, nlen, "name").decode()
        params[name] = _read_array(f, f"parameter {name}")
    (has_opt,) = struct.unpack("<B", _read_exact(f, 1, "optimizer flag"))
    moments = None
    if has_opt:
        (t,) = struct.unpack("<Q", _read_exact(f, 8, "optimizer step"))
        m, v = {}, {}
        for name in params:
            m[name] = _read_array(f, f"first moment of {name}")
            v[name] = _read_array(f, f"second moment of {name}")
        moments = {"t": t, "m": m, "v": v}
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return {**header, "params": params, "moments": moments}


def _check_params(expected: dict, found: dict) -> None:
    missing = [n for n in expected if n not in found]
    if missing:
        raise CheckpointError(f"missing parameter(s) in checkpoint: {', '.join(missing)}")
    extra = [n for n in found if n not in expected]
    if extra:
        raise CheckpointError(f"unexpected parameter(s) in checkpoint: {', '.join(extra)}")
    for name, p in expected.items():
        if tuple(found[name].shape) != tuple(p.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(found[name].shape)}, model {tuple(p.shape)}"
            )


def config_from_record(kind: str, config: dict):
    if kind == "unet":
        return UNetConfig.from_dict(config)
    if kind == "conunetr":
        return ModelConfig.from_dict(config)
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path, model: Optional[Module] = None, optimizer=None) -> tuple[Module, dict]:
    """Restore parameters (and optimizer moments when ``optimizer`` is given).

    Builds the model from the stored config when ``model`` is None. Returns
    ``(model, meta)``.
    """
    rec = read_checkpoint(path)
    if model is None:
        model = build_model(config_from_record(rec["kind"], rec["config"]))
    expected = dict(model.named_parameters())
    _check_params(expected, rec["params"])
    if optimizer is not None:
        if rec["moments"] is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        for key in ("m", "v"):
            _check_params(expected, rec["moments"][key])
    for name, p in expected.items():
        p.data = rec["params"][name].astype(p.data.dtype)
        p.grad = None
    if optimizer is not None:
        optimizer.load_moments(rec["moments"])
    return model, rec["meta"]
