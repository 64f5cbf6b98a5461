"""Flat binary checkpoints.

Layout (all integers little-endian):

    8 bytes   magic  b"SPBPCKPT"
    4 bytes   uint32 format version (currently 1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header:
                {"tensors": [{"name", "shape", "offset"}, ...], "meta": {...}}
    rest      tensor data, little-endian float64, C order; `offset` counts
              float64 elements from the start of the data section
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"SPBPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParameterStore, meta: dict | None = None) -> Path:
    path = Path(path)
    directory, offset = [], 0
    for name, value in params.items():
        directory.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size
    header = json.dumps({"tensors": directory, "meta": meta or {}}, sort_keys=True).encode()
    data = params.flatten().astype("<f8").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    data = np.frombuffer(raw[20 + hlen:], dtype="<f8").astype(np.float64)
    store = ParameterStore()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > data.size:
            raise CheckpointError("checkpoint data section is truncated")
        store.add(entry["name"], data[start:start + size].reshape(shape))
    return store, header["meta"]
