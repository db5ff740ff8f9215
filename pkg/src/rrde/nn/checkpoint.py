"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"RRDE1"                magic
    u32 version             FORMAT_VERSION
    u32 meta_len, bytes     UTF-8 JSON object (sorted keys)
    u32 count
    count x entry:
        u32 id_len, bytes   UTF-8 parameter id
        u32 rank
        rank x u64          shape
        prod(shape) x f64   row-major data

Arrays round-trip bit-exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RRDE1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for key, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        kb = key.encode()
        parts.append(struct.pack("<I", len(kb)))
        parts.append(kb)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes):
    """Inverse of :func:`dumps`; returns ``(arrays, meta)``."""
    try:
        return _loads(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _loads(blob: bytes):
    if blob[:5] != MAGIC:
        raise CheckpointError("not an RRDE checkpoint (bad magic)")
    pos = 5
    version, meta_len = struct.unpack_from("<II", blob, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(blob[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        key = blob[pos:pos + klen].decode()
        pos += klen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        n = int(np.prod(shape, dtype=np.int64))
        arrays[key] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    return arrays, meta


def save(path, arrays: dict, meta: dict | None = None):
    Path(path).write_bytes(dumps(arrays, meta))


def load(path):
    return loads(Path(path).read_bytes())
