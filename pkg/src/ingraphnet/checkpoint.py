"""Binary checkpoint container.

Layout (all integers unsigned 64-bit little-endian, values float64 LE)::

    b"IGK1" | count | { name_len | name (utf-8) | rank | dims[rank] | values }*
"""

from __future__ import annotations

import io
import os
import struct
from collections.abc import Mapping

import numpy as np

MAGIC = b"IGK1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U64.pack(len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(_U64.pack(len(raw)))
        buf.write(raw)
        buf.write(_U64.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U64.pack(d))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(blob, pos)
        pos += 8
        return v

    out: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        n = u64()
        if pos + n > len(blob):
            raise CheckpointError("truncated entry name")
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        dims = [u64() for _ in range(u64())]
        count = int(np.prod(dims)) if dims else 1
        end = pos + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated values for {name!r}")
        out[name] = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
