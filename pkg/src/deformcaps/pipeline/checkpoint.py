"""Little-endian binary checkpoint container.

Layout::

    magic b"DCAPSCKP" | u32 version | u64 step | u32 len + utf-8 config text
    | u32 record count | records

    record: u32 name length | name | u8 dtype tag (1 = f64) | u32 rank
            | u64 dims[rank] | raw little-endian f64 payload

Optimizer moments are stored as records named ``adam.m/<param>`` and
``adam.v/<param>``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DCAPSCKP"
VERSION = 1
F64_TAG = 1


class CheckpointError(ValueError):
    """File is not a readable checkpoint or does not match the model."""


@dataclass
class Checkpoint:
    config_text: str
    step: int
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw_name = name.encode()
    head = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<BI", F64_TAG, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    cfg = ckpt.config_text.encode()
    records = {**ckpt.params, **ckpt.moments}
    parts = [MAGIC, struct.pack("<IQ", ckpt.version, ckpt.step), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(records))]
    parts.extend(_record(name, arr) for name, arr in records.items())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e.strerror})") from e
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    try:
        pos = 8
        version, step = struct.unpack_from("<IQ", raw, pos)
        pos += 12
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        config_text = raw[pos:pos + n].decode()
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params, moments = {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode()
            pos += n
            tag, rank = struct.unpack_from("<BI", raw, pos)
            pos += 5
            if tag != F64_TAG:
                raise CheckpointError(f"{path}: record {name!r} has unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
            (moments if name.startswith("adam.") else params)[name] = arr
    except (struct.error, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(config_text, step, params, moments, version)
