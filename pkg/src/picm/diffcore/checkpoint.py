"""PICK checkpoint container.

Layout (all integers little-endian):

    magic   4s   b"PICK"
    version u16  currently 1
    count   u32  number of entries
    entry*  name_len u16, name bytes (UTF-8), dtype u8 (0 = float32),
            ndim u8, dims u32 each, then the raw little-endian payload
    crc     u32  CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"PICK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class CheckpointError(RuntimeError):
    pass


def save_pick(path, arrays):
    """Write a name -> ndarray mapping; float arrays are stored as float32."""
    blob = bytearray()
    blob += struct.pack("<4sHI", MAGIC, VERSION, len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name!r}")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", 0, data.ndim)
        for d in data.shape:
            blob += struct.pack("<I", d)
        blob += data.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_pick(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 14:
        raise CheckpointError("checkpoint truncated")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError("checkpoint CRC mismatch")
    magic, version, count = struct.unpack_from("<4sHI", blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    out = {}
    end = len(blob) - 4
    for _ in range(count):
        if off + 2 > end:
            raise CheckpointError("checkpoint truncated")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        dtype_id, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        if dtype_id not in _DTYPES:
            raise CheckpointError(f"unknown dtype id {dtype_id} for entry {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if ndim else 4
        if off + nbytes > end:
            raise CheckpointError(f"checkpoint truncated inside entry {name!r}")
        arr = np.frombuffer(blob, dtype=_DTYPES[dtype_id], count=nbytes // 4, offset=off)
        out[name] = arr.reshape(dims).copy()
        off += nbytes
    if off != end:
        raise CheckpointError("trailing bytes after final entry")
    return out
