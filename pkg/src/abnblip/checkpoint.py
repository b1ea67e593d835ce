"""Named-parameter checkpoint container.

Layout (little-endian)::

    b"ABNB" | version u32 | count u32 |
    count x ( name_len u16 | utf-8 name | rank u8 | rank x extent u32 | f64 payload )
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"ABNB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to write non-finite values in {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version}")
        off = 12
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries: dict[str, np.ndarray]) -> str:
    """Write ``entries`` and return the content id (first 12 hex of sha256)."""
    buf = dumps(entries)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()[:12]


def load(path) -> "OrderedDict[str, np.ndarray]":
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())


def content_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
