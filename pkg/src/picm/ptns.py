"""PTNS: a bare tensor-on-disk format.

Layout: magic b"PTNS", dtype u8 (0 = float32), ndim u8, dims as u32
little-endian, then the raw little-endian float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PTNS"


class TensorFileError(RuntimeError):
    pass


def save_ptns(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", 0, arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.tobytes())


def load_ptns(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise TensorFileError(f"not a PTNS file: {path}")
    dtype_id, ndim = struct.unpack_from("<BB", blob, 4)
    if dtype_id != 0:
        raise TensorFileError(f"unknown PTNS dtype id {dtype_id}")
    off = 6
    if len(blob) < off + 4 * ndim:
        raise TensorFileError(f"PTNS header truncated: {path}")
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(blob) != off + 4 * count:
        raise TensorFileError(f"PTNS payload size mismatch: {path}")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    return arr.reshape(dims).copy()
