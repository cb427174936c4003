"""Binary checkpoint container.

Layout::

    b"VICONCKP" | uint32 LE header length | UTF-8 JSON header | tensor blobs

The header carries the format version, the model config, free-form
metadata and a table ``{name, shape, offset, nbytes}`` for every blob.
Blobs are little-endian float32, row-major, packed back to back.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, param_shapes

MAGIC = b"VICONCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, cfg: ModelConfig, tensors: Mapping[str, np.ndarray],
                     meta: Mapping | None = None) -> None:
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "model_config": cfg.to_dict(),
                         "meta": dict(meta or {}), "tensors": table}).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format_version {header.get('format_version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(header["model_config"])
    body = raw[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        if entry["nbytes"] != n:
            raise CheckpointError(f"{path}: {entry['name']} byte length {entry['nbytes']} "
                                  f"does not match shape {shape}")
        start = entry["offset"]
        if start + n > len(body):
            raise CheckpointError(f"{path}: {entry['name']} truncated")
        tensors[entry["name"]] = (np.frombuffer(body, "<f4", n // 4, start)
                                  .reshape(shape).astype(np.float32))
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        key = "param/" + name
        if key not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tensors[key].shape != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {tensors[key].shape}, "
                                  f"config needs {shape}")
    return cfg, tensors, header["meta"]


def save_model(path, cfg: ModelConfig, params: Mapping[str, np.ndarray], meta=None) -> None:
    write_checkpoint(path, cfg, {"param/" + k: v for k, v in params.items()}, meta)


def load_model(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    cfg, tensors, _ = read_checkpoint(path)
    return cfg, {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
