"""Versioned model checkpoints: a JSON config header plus named, typed tensors.

Layout (little-endian)::

    b"DMCK" | u32 version | u32 config_len | config JSON (utf-8, sorted keys)
    u32 n_tensors
    per tensor, sorted by name:
        u16 name_len | name | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 shape | payload
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .recon import CascadeConfig, UnrolledNet

MAGIC = b"DMCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def encode(config: CascadeConfig, params: dict[str, np.ndarray], extra: dict | None = None) -> bytes:
    header = {"cascade": config.to_dict(), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[CascadeConfig, dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, n_cfg = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
        pos = 12
        header = json.loads(buf[pos:pos + n_cfg].decode())
        pos += n_cfg
        (n_tensors,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(n_tensors):
            (n_name,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n_name].decode()
            pos += n_name
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            count = int(np.prod(shape, dtype=np.int64))
            if pos + count * dtype.itemsize > len(buf):
                raise CheckpointError(f"truncated tensor {name!r}")
            params[name] = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
            pos += count * dtype.itemsize
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return CascadeConfig.from_dict(header["cascade"]), params, header.get("extra", {})


def check_against(config: CascadeConfig, params: dict[str, np.ndarray]) -> None:
    """Raise :class:`CheckpointShapeError` naming the first tensor that disagrees with ``config``."""
    expected = UnrolledNet(config).init(np.random.default_rng(0), np.float64)
    for name, ref in expected.items():
        if name not in params:
            raise CheckpointShapeError(f"tensor {name!r} missing from checkpoint")
        if params[name].shape != ref.shape:
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {params[name].shape}, config expects {ref.shape}")
    unknown = sorted(set(params) - set(expected))
    if unknown:
        raise CheckpointShapeError(f"tensor {unknown[0]!r} is not part of the configuration")


def save_checkpoint(path: str | os.PathLike, config: CascadeConfig, params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(config, params, extra))


def load_checkpoint(path: str | os.PathLike, config: CascadeConfig | None = None):
    """Load ``(config, params, extra)``; with ``config`` given, validate tensors against it."""
    with open(path, "rb") as fh:
        stored, params, extra = decode(fh.read())
    check_against(config or stored, params)
    return config or stored, params, extra
