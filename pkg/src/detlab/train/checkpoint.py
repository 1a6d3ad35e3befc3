"""Binary checkpoints: magic bytes, version, JSON manifest, raw buffers.

Layout: b"DLCK" | u32 version | u64 header_len | header JSON (utf-8) |
little-endian buffers in manifest order. The manifest records every
parameter and buffer (name, shape, dtype, kind, partition, trainable) plus
the run's RNG state and free-form metadata. Save -> load -> save is byte
identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ParseError

MAGIC = b"DLCK"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    entries: list  # manifest entry dicts, in buffer order
    arrays: dict  # name -> np.ndarray
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def names(self):
        return [e["name"] for e in self.entries]


def snapshot(model, rng_state=None, meta=None):
    """In-memory checkpoint of a module tree (params + buffers)."""
    entries, arrays = [], {}
    for kind, items in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
        for name, t in items:
            e = {
                "name": name,
                "shape": [int(d) for d in t.shape],
                "dtype": str(t.data.dtype),
                "kind": kind,
            }
            if kind == "param":
                e["partition"] = t.partition
                e["trainable"] = bool(t.trainable)
            entries.append(e)
            arrays[name] = t.data.copy()
    return Checkpoint(entries=entries, arrays=arrays, rng_state=rng_state or {}, meta=meta or {})


def save_checkpoint(ckpt, path):
    header = json.dumps(
        {"entries": ckpt.entries, "rng_state": ckpt.rng_state, "meta": ckpt.meta},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for e in ckpt.entries:
            arr = np.ascontiguousarray(ckpt.arrays[e["name"]].astype(_DTYPES[e["dtype"]]))
            f.write(arr.tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ParseError(f"{path} is not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for e in header["entries"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"]).copy()
        offset += count * dt.itemsize
    return Checkpoint(
        entries=header["entries"],
        arrays=arrays,
        rng_state=header.get("rng_state", {}),
        meta=header.get("meta", {}),
    )


def load_into(model, ckpt, prefix=""):
    """Copy checkpoint buffers into matching model entries.

    Every checkpoint entry under ``prefix`` must exist in the model with a
    matching shape; model entries absent from the checkpoint are untouched.
    """
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for e in ckpt.entries:
        name = e["name"]
        if prefix and not name.startswith(prefix):
            continue
        target = params.get(name) or buffers.get(name)
        if target is None:
            raise ConfigurationError(f"checkpoint entry {name!r} has no counterpart in the model")
        src = ckpt.arrays[name]
        if tuple(target.shape) != tuple(src.shape):
            raise ConfigurationError(
                f"checkpoint entry {name!r} shape {tuple(src.shape)} does not match model {tuple(target.shape)}"
            )
        target.data[...] = src.astype(target.data.dtype)
