"""Binary checkpoint container.

Layout (little-endian): magic ``CLSTMPPO``, uint32 format version, uint32
record count, then per record: uint32 name length, UTF-8 name, uint32 ndim,
ndim x uint64 dims, row-major float64 values.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import DataError

MAGIC = b"CLSTMPPO"
VERSION = 1


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes(order="C"))
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != MAGIC:
        raise DataError("not a checkpoint: bad magic header")
    pos = 8
    try:
        version, count = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise DataError(f"checkpoint truncated inside record {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise DataError(f"checkpoint truncated: {exc}") from None
    if pos != len(data):
        raise DataError("trailing bytes after last checkpoint record")
    return out


def save(arrays: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
