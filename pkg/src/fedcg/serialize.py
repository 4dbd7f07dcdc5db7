"""Binary checkpoint format for named parameter tensors.

Layout: magic ``FCG1``, then one record per tensor — u32 name length,
UTF-8 name, u32 rank, rank u64 extents, raw little-endian float32 values.
All integers little-endian. Values are stored at 32-bit precision; a
save/load/save cycle is byte-identical.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"FCG1"


class CheckpointError(ValueError):
    """Malformed checkpoint stream."""


def write_tensors(stream: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            stream.write(struct.pack("<Q", extent))
        stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    magic = stream.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    tensors: dict[str, np.ndarray] = {}
    while True:
        head = stream.read(4)
        if not head:
            break
        if len(head) < 4:
            raise CheckpointError("truncated record header")
        (name_len,) = struct.unpack("<I", head)
        name_bytes = stream.read(name_len)
        if len(name_bytes) < name_len:
            raise CheckpointError("truncated tensor name")
        name = name_bytes.decode("utf-8")
        rank_bytes = stream.read(4)
        if len(rank_bytes) < 4:
            raise CheckpointError(f"truncated rank for tensor '{name}'")
        (rank,) = struct.unpack("<I", rank_bytes)
        shape = []
        for _ in range(rank):
            ext_bytes = stream.read(8)
            if len(ext_bytes) < 8:
                raise CheckpointError(f"truncated extents for tensor '{name}'")
            shape.append(struct.unpack("<Q", ext_bytes)[0])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = stream.read(4 * count)
        if len(payload) < 4 * count:
            raise CheckpointError(f"truncated values for tensor '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return tensors


def dump_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def load_bytes(blob: bytes) -> dict[str, np.ndarray]:
    return read_tensors(io.BytesIO(blob))


def save_file(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def load_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_tensors(fh)
