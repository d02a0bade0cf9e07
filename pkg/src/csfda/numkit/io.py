"""Binary checkpoint container.

Layout (little-endian)::

    b"CSFD"  u32 version
    repeated:
        u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 values[prod(dims)]
"""

from __future__ import annotations

import struct
from os import PathLike
from typing import Mapping

import numpy as np

from csfda.errors import DataFormatError

MAGIC = b"CSFD"
VERSION = 1


def save_checkpoint(path: str | PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(np.asarray(arr.shape, dtype="<u8").tobytes())
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str | PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = np.frombuffer(buf, dtype="<u8", count=rank, offset=pos).astype(np.int64)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            out[name] = values.astype(np.float64).reshape(tuple(dims))
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated checkpoint") from exc
    return out
