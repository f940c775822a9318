"""Flat binary parameter checkpoints.

Layout (all integers little-endian)::

    b"GMNC" | version u32 | param count u32 | meta length u32 | meta (UTF-8 JSON)
    per parameter: name length u32 | name (UTF-8) | rank u32 | extents u64 * rank
                   | values f64 * prod(extents)

``meta`` carries the model architecture so evaluation needs no config file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GMNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(values: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<III", VERSION, len(values), len(meta_bytes)), meta_bytes]
    for name, arr in values.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("bad checkpoint header")
    version, count, meta_len = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        values = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(blob):
                raise CheckpointError(f"truncated checkpoint at parameter {name!r}")
            values[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last parameter record")
    return meta, values


def save(path, values: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(values, meta))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
