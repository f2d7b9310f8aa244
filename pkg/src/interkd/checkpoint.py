"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"IKDC" | u16 version | u32 len | metadata JSON (utf-8) | u32 count
    count x ( u16 len | name (utf-8) | u8 ndim | ndim x u32 dim | f64 data )
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IKDC"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(params: dict[str, np.ndarray], path: str | os.PathLike,
                    metadata: dict | None = None):
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() is C order; keeps 0-d shape
        raw = name.encode()
        chunks.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | os.PathLike, with_metadata: bool = False):
    """Read a checkpoint; returns ``params`` or ``(params, metadata)``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    metadata = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, ndim = r.unpack("<HB")
        name = r.take(name_len).decode()
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return (params, metadata) if with_metadata else params


def restore(module, path: str | os.PathLike) -> dict:
    """Load parameters into ``module``; returns the checkpoint metadata."""
    params, metadata = load_checkpoint(path, with_metadata=True)
    try:
        module.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return metadata
