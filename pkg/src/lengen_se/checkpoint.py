"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"LGSECKPT"
    version    uint32    currently 1
    cfg_len    uint32    length of the following UTF-8 JSON
    cfg        bytes     ModelConfig as JSON with sorted keys
    meta_len   uint32
    meta       bytes     free-form JSON (training step, RNG state, ...)
    n_tensors  uint32
    then per tensor, in the order they were written:
      name_len uint16, name (UTF-8)
      ndim     uint8,  dims (uint32 each)
      data     float64 little-endian, C order

Model parameters are written in :func:`model.param_shapes` order.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, check_params, param_shapes

MAGIC = b"LGSECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write(path, config: ModelConfig, tensors: dict, meta: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (_dumps(config.to_dict()), _dumps(meta or {})):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", value.ndim)]
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    blobs = []
    for _ in range(2):
        (n,) = take("<I")
        blobs.append(json.loads(buf[pos : pos + n].decode()))
        pos += n
    cfg, meta = blobs
    config = ModelConfig(**cfg)
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = buf[pos : pos + n].decode()
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, tensors, meta


def save_model(path, config: ModelConfig, params: dict, meta: dict | None = None) -> None:
    check_params(params, config)
    write(path, config, {name: params[name] for name in param_shapes(config)}, meta)


def load_model(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    config, tensors, meta = read(path)
    params = {name: tensors[name] for name in param_shapes(config) if name in tensors}
    check_params(params, config)
    return config, params, meta
