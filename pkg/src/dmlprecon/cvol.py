"""CVOL: a small little-endian binary container for volumes, coil stacks and masks.

Layout::

    b"CVOL" | u8 version=1 | u8 dtype | u8 ndim | u8 reserved=0 | ndim x u32 dims | payload

dtype codes: 0 complex64 (interleaved re/im f32), 1 float32, 2 uint8 mask.
Dims are outermost first and the payload is row-major.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CVOL"
VERSION = 1
HEADER = struct.Struct("<4sBBBB")
MAX_PAYLOAD_BYTES = 1 << 36

DTYPE_COMPLEX = 0
DTYPE_REAL = 1
DTYPE_MASK = 2

_NUMPY_DTYPES = {
    DTYPE_COMPLEX: np.dtype("<c8"),
    DTYPE_REAL: np.dtype("<f4"),
    DTYPE_MASK: np.dtype("u1"),
}


class CvolError(Exception):
    code = "cvol_error"


class BadMagic(CvolError):
    code = "bad_magic"


class UnsupportedVersion(CvolError):
    code = "unsupported_version"


class BadHeader(CvolError):
    code = "bad_header"


class TruncatedPayload(CvolError):
    code = "truncated_payload"


class DimensionOverflow(CvolError):
    code = "dimension_overflow"


def dtype_code(array: np.ndarray) -> int:
    if array.dtype == np.bool_ or array.dtype == np.uint8:
        return DTYPE_MASK
    if np.iscomplexobj(array):
        return DTYPE_COMPLEX
    if np.issubdtype(array.dtype, np.floating):
        return DTYPE_REAL
    raise TypeError(f"cannot store dtype {array.dtype} in CVOL")


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = dtype_code(array)
    if array.ndim < 1 or array.ndim > 255:
        raise BadHeader(f"unsupported rank {array.ndim}")
    if any(d > 0xFFFFFFFF for d in array.shape):
        raise DimensionOverflow(f"dimension exceeds u32: {array.shape}")
    payload = np.ascontiguousarray(array.astype(_NUMPY_DTYPES[code], copy=False))
    if payload.nbytes > MAX_PAYLOAD_BYTES:
        raise DimensionOverflow(f"payload of {payload.nbytes} bytes exceeds limit")
    head = HEADER.pack(MAGIC, VERSION, code, array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return head + dims + payload.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TruncatedPayload("file shorter than CVOL header")
    magic, version, code, ndim, _ = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"CVOL version {version} not supported")
    if code not in _NUMPY_DTYPES:
        raise BadHeader(f"unknown dtype code {code}")
    if ndim == 0:
        raise BadHeader("zero-rank volume")
    offset = HEADER.size + 4 * ndim
    if len(buf) < offset:
        raise TruncatedPayload("truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}I", buf, HEADER.size)
    if 0 in dims:
        raise BadHeader(f"zero-sized dimension in {dims}")
    dtype = _NUMPY_DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if nbytes > MAX_PAYLOAD_BYTES:
        raise DimensionOverflow(f"declared dims {dims} imply {nbytes} bytes")
    if len(buf) < offset + nbytes:
        raise TruncatedPayload(f"truncated payload: expected {nbytes} bytes, found {len(buf) - offset}")
    if len(buf) > offset + nbytes:
        raise BadHeader("trailing bytes after payload")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


def write_volume(array: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read_volume(path: str | os.PathLike) -> np.ndarray:
    """Read a CVOL file. The returned dtype is the tag: complex64, float32 or uint8."""
    with open(path, "rb") as fh:
        return decode(fh.read())


def read_mask(path: str | os.PathLike) -> np.ndarray:
    arr = read_volume(path)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise BadHeader(f"{path}: expected a 2D mask (dtype code 2), got {arr.dtype} {arr.shape}")
    return arr.astype(bool)
