"""Binary parameter checkpoints.

Layout (little-endian)::

    b"CFWT"  version:u8  count:u32
    repeated count times:
        name_len:u16  name:utf-8  rank:u8  dims:u32*rank  payload:f32*prod(dims)
"""

from __future__ import annotations

import hashlib
import struct
from typing import Mapping

import numpy as np

MAGIC = b"CFWT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    mv = memoryview(buf)
    if len(mv) < 9 or bytes(mv[:4]) != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic at offset 0")
    version, count = struct.unpack_from("<BI", mv, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at offset 4")
    off = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", mv, off)
            off += 2
            name = bytes(mv[off:off + n]).decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", mv, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", mv, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(mv):
                raise CheckpointFormatError(f"payload for {name!r} truncated at offset {off}")
            out[name] = np.frombuffer(mv, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint at offset {off}") from exc
    if off != len(mv):
        raise CheckpointFormatError(f"trailing bytes after offset {off}")
    return out


def digest(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()
