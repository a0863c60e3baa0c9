"""Binary tensor checkpoints.

Layout (little endian)::

    b"STCT" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | float32 values )
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Dict, Mapping, Union

import numpy as np

MAGIC = b"STCT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        out[name] = values.astype(np.float32)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path: Union[str, os.PathLike], tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(tensors))


def load_checkpoint(path: Union[str, os.PathLike, BinaryIO]) -> Dict[str, np.ndarray]:
    if hasattr(path, "read"):
        return parse_checkpoint(path.read())
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
