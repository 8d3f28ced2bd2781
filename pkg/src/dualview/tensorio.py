"""Bit-exact binary tensor serialization (MDGT format).

Layout: magic ``MDGT``, version byte 0x01, dtype byte (0x00 = float32,
0x01 = float64), ndim byte, ndim little-endian u32 extents, then the
row-major little-endian payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MDGT"
VERSION = 0x01
_DTYPE_CODES = {np.dtype("<f4"): 0x00, np.dtype("<f8"): 0x01}
_CODE_DTYPES = {0x00: np.dtype("<f4"), 0x01: np.dtype("<f8")}


class TensorFormatError(ValueError):
    """Malformed or unsupported MDGT data."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)        # tobytes(order="C") handles layout; keep 0-d
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32/float64")
    if arr.ndim > 255:
        raise TensorFormatError("more than 255 dimensions")
    head = MAGIC + bytes([VERSION, _DTYPE_CODES[dt], arr.ndim])
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + dims + arr.astype(dt, copy=False).tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 7:
        raise TensorFormatError("truncated header")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}")
    if blob[4] != VERSION:
        raise TensorFormatError(f"unsupported version {blob[4]}")
    if blob[5] not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {blob[5]:#x}")
    dtype = _CODE_DTYPES[blob[5]]
    ndim = blob[6]
    off = 7 + 4 * ndim
    if len(blob) < off:
        raise TensorFormatError("truncated dimension table")
    shape = struct.unpack(f"<{ndim}I", blob[7:off]) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = blob[off:]
    if len(payload) != count * dtype.itemsize:
        raise TensorFormatError(
            f"payload length {len(payload)} != expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensor(arr: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
