"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"GZDTCKPT"
    version    u32
    config     u32 length + UTF-8 JSON
    n_records  u32
    record     u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims,
               prod(dims) x f8 values

Parameter records are stored under their module path; optimizer moments
are stored under an ``optim/`` prefix.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"GZDTCKPT"
VERSION = 1
OPTIM_PREFIX = "optim/"


class CheckpointError(ValueError):
    pass


def _write_record(fh, name, arr):
    arr = np.asarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(path, config, params, optim_state=None):
    """Write ``params`` (name -> array) and an optional optimizer state."""
    records = list(params.items())
    if optim_state:
        records += [(OPTIM_PREFIX + k, v) for k, v in optim_state.items()]
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)


def _read(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Return ``(config, params, optim_state)``; the last is empty if absent."""
    with open(path, "rb") as fh:
        if _read(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read(fh, 4, "config length"))
        config = json.loads(_read(fh, n, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4, "record count"))
        params, optim = {}, {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, ln, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim, f"{name} shape"))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read(fh, 8 * size, f"{name} values"), dtype="<f8").reshape(shape)
            arr = arr.astype(np.float64)
            if name.startswith(OPTIM_PREFIX):
                optim[name[len(OPTIM_PREFIX):]] = arr
            else:
                params[name] = arr
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last record")
    return config, params, optim


def model_state(model):
    return {name: p.data for name, p in model.named_parameters()}


def load_model_state(model, params):
    """Copy arrays into the model's parameters, checking names and shapes."""
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != model {p.data.shape}")
        p.data[...] = params[name]
