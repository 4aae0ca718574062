"""PGCN checkpoint files.

Layout::

    b"PGCN" | version (1 byte) | header length (u64 LE) | JSON header | payload | CRC32 of payload (u32 LE)

The header holds a manifest of ``{name, dtype: "f32", shape, offset}`` entries
plus free-form ``meta``; the payload is the raw little-endian float32 data of
each tensor in manifest order.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from pgcn.autodiff.nn import Module
from pgcn.errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError

MAGIC = b"PGCN"
VERSION = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    manifest: list[dict[str, Any]] = field(default_factory=list)


def encode(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        manifest.append({"name": name, "dtype": "f32", "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"tensors": manifest, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, bytes([VERSION]), struct.pack("<Q", len(header)), header, payload,
                     struct.pack("<I", zlib.crc32(payload))])


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 13 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not a PGCN checkpoint (bad magic or truncated preamble)")
    if blob[4] != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {blob[4]} (this build reads {VERSION})")
    (hlen,) = struct.unpack("<Q", blob[5:13])
    if 13 + hlen + 4 > len(blob):
        raise CorruptCheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[13:13 + hlen].decode("utf-8"))
        manifest = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from None
    payload = blob[13 + hlen:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpointError("payload CRC mismatch")
    tensors = {}
    for entry in manifest:
        if entry.get("dtype") != "f32":
            raise CorruptCheckpointError(f"{entry.get('name')}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CorruptCheckpointError(f"{entry['name']}: data runs past the payload")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype=_LE_F32).reshape(shape).astype(np.float32)
    return Checkpoint(tensors, header.get("meta", {}), manifest)


def save_checkpoint(path: str | Path, model: Module, meta: dict[str, Any] | None = None) -> Path:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(model.state_dict(), meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Decode a checkpoint file; a missing file raises :class:`FileNotFoundError`."""
    return decode(Path(path).read_bytes())


def load_into(model: Module, ckpt: Checkpoint) -> Module:
    """Copy tensors into ``model``; nothing is modified unless every tensor fits."""
    own = dict(model.state_dict())
    missing = sorted(set(own) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(own))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing={missing[:5]} unexpected={extra[:5]}")
    for name, arr in own.items():
        if arr.shape != ckpt.tensors[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {ckpt.tensors[name].shape} vs model {arr.shape}")
    model.load_state_dict(ckpt.tensors)
    return model
