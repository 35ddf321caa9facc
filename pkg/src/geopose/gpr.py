"""GPR raster container and model checkpoints.

Layout: magic ``b"GPR1"``, a little-endian uint32 header length, a UTF-8 JSON
header (sorted keys, no whitespace), then the raw little-endian payload in
C order. The header always carries ``shape`` and ``dtype``; rasters add
``units`` and optionally ``geometry`` and ``orientation``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"GPR1"
DTYPES = {"float32": "<f4", "uint8": "u1"}


class FormatError(ValueError):
    pass


def _dumps(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(array: np.ndarray, **meta: Any) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    kind = "uint8" if arr.dtype == np.uint8 else "float32"
    if kind == "float32":
        if not np.issubdtype(arr.dtype, np.number):
            raise TypeError(f"cannot store dtype {arr.dtype}")
        arr = arr.astype("<f4")
    header = {k: v for k, v in meta.items() if v is not None}
    header.update(shape=list(arr.shape), dtype=kind)
    head = _dumps(header)
    return MAGIC + struct.pack("<I", len(head)) + head + np.ascontiguousarray(arr).tobytes()


def decode(blob: bytes) -> tuple[np.ndarray, dict]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not a GPR1 blob")
    (n,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
        shape = tuple(int(v) for v in header["shape"])
        dtype = np.dtype(DTYPES[header["dtype"]])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad GPR header: {exc}") from exc
    payload = blob[8 + n:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return arr, header


def write(path: str | Path, array: np.ndarray, **meta: Any) -> None:
    Path(path).write_bytes(encode(array, **meta))


def read(path: str | Path) -> tuple[np.ndarray, dict]:
    return decode(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# Checkpoints: the same container, payload = concatenated float32 weights
# ----------------------------------------------------------------------------

def encode_checkpoint(model) -> bytes:
    from dataclasses import asdict

    names = list(model.params)
    flat = np.concatenate([model.params[k].ravel() for k in names]) if names else np.zeros(0)
    cfg = asdict(model.config)
    cfg["kernels"] = list(cfg["kernels"])
    return encode(
        flat,
        kind="checkpoint",
        model=cfg,
        variant=model.variant.name,
        params=[[k, list(model.params[k].shape)] for k in names],
    )


def decode_checkpoint(blob: bytes):
    from .model import Model, ModelConfig, VariantConfig, param_shapes

    flat, header = decode(blob)
    if header.get("kind") != "checkpoint":
        raise FormatError("GPR blob is not a checkpoint")
    cfg_d = dict(header["model"])
    cfg_d["kernels"] = tuple(cfg_d["kernels"])
    config = ModelConfig(**cfg_d)
    variant = VariantConfig.from_name(header["variant"])
    expected = param_shapes(config, variant)
    params = {}
    offset = 0
    for name, shape in header["params"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise FormatError(f"parameter {name} has shape {shape}, expected {expected.get(name)}")
        size = int(np.prod(shape))
        params[name] = flat[offset:offset + size].astype(np.float64).reshape(shape)
        offset += size
    if offset != flat.size or set(params) != set(expected):
        raise FormatError("checkpoint parameters do not match the model layout")
    return Model(config, variant, {k: params[k] for k in expected})
