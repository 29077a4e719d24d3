"""GPFF: a minimal binary container for dense float32 tensors.

Frame layout, all integers little-endian:

    magic   4 bytes  b"GPFF"
    version u8       currently 1
    dtype   u8       0 = float32 (the only defined code)
    rank    u8
    dims    rank * u64
    payload row-major float32 values
    crc     u32      CRC32 of the payload bytes

Frames are self-delimiting, so several can be concatenated in one file
(the student checkpoint does this).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import IntegrityError

MAGIC = b"GPFF"
VERSION = 1
DTYPE_FLOAT32 = 0

_HEADER = struct.Struct("<4sBBB")


def pack_frame(array: np.ndarray) -> bytes:
    """Serialize one tensor as a GPFF frame."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    parts = [_HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, arr.ndim)]
    parts.append(struct.pack("<%dQ" % arr.ndim, *arr.shape))
    payload = arr.tobytes(order="C")
    parts.append(payload)
    parts.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return b"".join(parts)


def unpack_frame(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one frame starting at ``offset``; returns (tensor, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise IntegrityError("truncated GPFF header")
    magic, version, dtype, rank = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise IntegrityError("bad GPFF magic %r" % magic)
    if version != VERSION:
        raise IntegrityError("unsupported GPFF version %d" % version)
    if dtype != DTYPE_FLOAT32:
        raise IntegrityError("unsupported GPFF dtype code %d" % dtype)
    offset += _HEADER.size
    if len(buf) - offset < 8 * rank:
        raise IntegrityError("truncated GPFF dims")
    dims = struct.unpack_from("<%dQ" % rank, buf, offset)
    offset += 8 * rank
    count = 1
    for d in dims:
        count *= d
    nbytes = 4 * count
    if len(buf) - offset < nbytes + 4:
        raise IntegrityError("GPFF payload shorter than declared size")
    payload = buf[offset : offset + nbytes]
    offset += nbytes
    (stored_crc,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if (zlib.crc32(payload) & 0xFFFFFFFF) != stored_crc:
        raise IntegrityError("GPFF payload CRC mismatch")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return arr, offset


def write_gpff(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_frame(array))


def read_gpff(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = unpack_frame(buf, 0)
    if end != len(buf):
        raise IntegrityError("trailing bytes after GPFF frame")
    return arr
