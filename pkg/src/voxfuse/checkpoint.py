"""Bit-exact flat tensor checkpoint.

Layout: magic "VOXK", version uint32 LE, tensor count uint32 LE, then per
tensor: name length uint16 LE + UTF-8 name, rank uint8, dims uint32 LE x rank,
values float32 LE row-major. Names under the "acoustic." prefix are frozen
by convention; scalar metadata travels as "meta.<key>" one-element tensors.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VOXK"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Write name->array (row-major float32) plus scalar meta entries."""
    items = dict(tensors)
    for key, val in (meta or {}).items():
        items[f"meta.{key}"] = np.asarray([float(val)], dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    """Read back (tensors, meta); inverse of save_checkpoint."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    tensors, meta = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        if name.startswith("meta."):
            meta[name[5:]] = float(arr.reshape(-1)[0])
        else:
            tensors[name] = arr
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return tensors, meta
