"""Deterministic checkpoint container.

A flat binary archive of named float64 arrays with a JSON metadata block.
Entries are written sorted by name in little-endian layout, so identical
contents always produce identical bytes (unlike zip-based containers,
which embed timestamps). Layout:

    magic "PSCK" | version u32 | meta_len u64 | meta JSON (sorted keys)
    | count u64 | entries

    entry: name_len u16 | name utf-8 | ndim u8 | dims i64 * ndim | float64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSCK"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<Q", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<q", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 8
    (meta_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    meta = json.loads(raw[offset : offset + meta_len].decode()) if meta_len else {}
    offset += meta_len
    (count,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}q", raw, offset) if ndim else ()
        offset += 8 * ndim
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).copy()
        offset += 8 * size
        arrays[name] = data.reshape(dims)
    return arrays, meta
