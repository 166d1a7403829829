"""Checkpoint container format.

Layout (all integers little-endian):

    magic   4 bytes  "GMFK"
    u32     format version (currently 1)
    u32     entry count
    entries u16 name length | UTF-8 name | u8 dtype (0=f32, 1=f64) |
            u8 rank | u32 dims[rank] | raw little-endian element data
    u32     metadata length
    bytes   UTF-8 JSON metadata

Model parameters are stored under their own names; optimizer moments, when
present, under ``opt.m.<name>`` / ``opt.v.<name>``. Loading is strict about
structure (bad magic, version, or truncation raise with the file offset)
but forward-compatible about content: unknown extra entries are ignored
with a warning.
"""

from __future__ import annotations

import json
import logging
import struct

import numpy as np

from .autodiff import parameter
from .flowio import atomic_write_bytes
from .model import ModelConfig, ModelWeights, model_param_specs

logger = logging.getLogger(__name__)

MAGIC = b"GMFK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointFormatError(ValueError):
    """Structurally invalid checkpoint file."""


def _pack_entry(name, array):
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointFormatError(f"entry name too long: {name!r}")
    code = _DTYPE_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise CheckpointFormatError(f"unsupported dtype {array.dtype} for {name!r}")
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + array.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C")


def save_checkpoint(weights, path, optimizer_state=None, iteration=None):
    """Serialize model weights (and optionally optimizer state) atomically."""
    entries = [(name, p.data) for name, p in weights.named_parameters()]
    meta = {
        "config": weights.config.__dict__.copy(),
        "iteration": iteration,
        "optimizer_step": None,
    }
    if optimizer_state is not None:
        meta["optimizer_step"] = int(optimizer_state["step"])
        for name, arr in optimizer_state["m"].items():
            entries.append((f"opt.m.{name}", arr))
        for name, arr in optimizer_state["v"].items():
            entries.append((f"opt.v.{name}", arr))

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(entries))
    for name, arr in entries:
        blob += _pack_entry(name, np.asarray(arr))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    atomic_write_bytes(path, bytes(blob))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _parse(blob):
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    count = r.u32()
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(n_bytes), dtype=dtype).reshape(dims).copy()
        entries[name] = data
    meta_len = r.u32()
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    if r.pos != len(blob):
        raise CheckpointFormatError(
            f"{len(blob) - r.pos} trailing bytes after metadata at offset {r.pos}"
        )
    return entries, meta


def load_checkpoint(path):
    """Reconstruct (ModelWeights, extras) from a checkpoint file.

    extras carries ``iteration`` and, when stored, the ``optimizer`` state
    dict. Entries that match neither a model parameter nor optimizer state
    are skipped with a warning so newer writers stay loadable.
    """
    with open(path, "rb") as f:
        blob = f.read()
    entries, meta = _parse(blob)

    config = ModelConfig(**meta["config"]).validate()
    params = {}
    for name, shape, _ in model_param_specs(config):
        if name not in entries:
            raise CheckpointFormatError(f"checkpoint is missing parameter {name!r}")
        data = entries.pop(name)
        if tuple(data.shape) != tuple(shape):
            raise CheckpointFormatError(
                f"parameter {name!r} has shape {tuple(data.shape)}, expected {tuple(shape)}"
            )
        params[name] = parameter(data.astype(config.np_dtype, copy=False))
    weights = ModelWeights(config, params)

    optimizer = None
    if meta.get("optimizer_step") is not None:
        optimizer = {"step": int(meta["optimizer_step"]), "m": {}, "v": {}}
        for key in list(entries):
            if key.startswith("opt.m."):
                optimizer["m"][key[len("opt.m.") :]] = entries.pop(key)
            elif key.startswith("opt.v."):
                optimizer["v"][key[len("opt.v.") :]] = entries.pop(key)

    for leftover in entries:
        logger.warning("ignoring unknown checkpoint entry %r", leftover)

    return weights, {"iteration": meta.get("iteration"), "optimizer": optimizer}
