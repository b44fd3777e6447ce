"""LTF1 binary tensor format.

Layout of one record: the 4-byte magic ``b"LTF1"``, a u8 rank, ``rank``
little-endian u32 dimensions, then the row-major payload as little-endian
float64. Records may be concatenated back to back in a single stream.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LTF1"
_LE_F64 = np.dtype("<f8")


def encode(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} does not fit in a u8")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"LTF1 dimensions must be positive, got {arr.shape}")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; returns (array, next offset)."""
    if len(buf) - offset < 4:
        raise FormatError("truncated magic", offset)
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset)
    pos = offset + 4
    if pos >= len(buf):
        raise FormatError("missing rank byte", pos)
    rank = buf[pos]
    pos += 1
    if len(buf) - pos < 4 * rank:
        raise FormatError(f"truncated dimensions for rank {rank}", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero dimension", pos + 4 * i)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"payload needs {nbytes} bytes, {len(buf) - pos} available", pos)
    arr = np.frombuffer(buf, dtype=_LE_F64, count=count, offset=pos).astype(np.float64)
    return arr.reshape(dims), pos + nbytes


def decode_all(buf: bytes) -> list[np.ndarray]:
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = decode(buf, pos)
        out.append(arr)
    return out


def write(path, array) -> None:
    Path(path).write_bytes(encode(array))


def read(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", end)
    return arr


def write_many(path, arrays) -> list[int]:
    """Write concatenated records; returns the byte offset of each record."""
    offsets, chunks, pos = [], [], 0
    for a in arrays:
        blob = encode(a)
        offsets.append(pos)
        chunks.append(blob)
        pos += len(blob)
    Path(path).write_bytes(b"".join(chunks))
    return offsets


def read_many(path) -> list[np.ndarray]:
    return decode_all(Path(path).read_bytes())
