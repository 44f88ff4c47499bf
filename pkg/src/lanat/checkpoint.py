"""Flat binary checkpoint: magic, JSON header, names/shapes, f64 payloads.

Layout, all integers little-endian:

    "LANAT1"
    u32 header_len, then header_len bytes of UTF-8 JSON
        {"config": {...}, "stages": [...]}   (sorted keys)
    u32 n_params
    per parameter: u32 name_len, name UTF-8, u32 ndim, ndim x u64 dims
    per parameter: contiguous row-major f64 bytes, same order

Writing the same model twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import LaNat, LaNatConfig

MAGIC = b"LANAT1"


class CheckpointError(ValueError):
    pass


def save_model(path, model: LaNat, stages: list[int] | None = None) -> None:
    header = json.dumps(
        {"config": model.config.to_dict(), "stages": list(stages or [])},
        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_arrays(path) -> tuple[dict, list[int], dict[str, np.ndarray]]:
    """Raw archive contents: (config dict, stage provenance, name -> array)."""
    blob = Path(path).read_bytes()
    if blob[:6] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    off = 6

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (header_len,) = take("<I")
    header = json.loads(blob[off:off + header_len].decode())
    off += header_len
    (n_params,) = take("<I")
    metas = []
    for _ in range(n_params):
        (name_len,) = take("<I")
        name = blob[off:off + name_len].decode()
        off += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        metas.append((name, tuple(int(s) for s in shape)))
    arrays = {}
    for name, shape in metas:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += count * 8
        arrays[name] = arr.reshape(shape).astype(np.float64)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return header["config"], [int(s) for s in header["stages"]], arrays


def load_model(path) -> tuple[LaNat, list[int]]:
    """Rebuild a model from an archive; shapes must match the config."""
    config_dict, stages, arrays = read_arrays(path)
    model = LaNat(LaNatConfig.from_dict(config_dict))
    _fill(model, arrays, path)
    return model, stages


def load_into(model: LaNat, path) -> list[int]:
    """Overwrite an existing model's parameters; config must match exactly."""
    config_dict, stages, arrays = read_arrays(path)
    if LaNatConfig.from_dict(config_dict) != model.config:
        raise CheckpointError(f"{path}: checkpoint config does not match the model")
    _fill(model, arrays, path)
    return stages


def _fill(model: LaNat, arrays: dict[str, np.ndarray], path) -> None:
    if set(arrays) != set(model.params):
        missing = sorted(set(model.params) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(model.params))[:3]
        raise CheckpointError(f"{path}: parameter names disagree "
                              f"(missing {missing}, unexpected {extra})")
    for name, p in model.params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, "
                                  f"expected {p.data.shape}")
        p.data = arr.copy()
        p.grad = None
