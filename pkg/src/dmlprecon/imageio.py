"""8-bit grayscale export (PGM written directly, PNG through Pillow)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> tuple[np.ndarray, float, float]:
    """Min-max window ``img`` to 0..255; returns the image and the window used."""
    img = np.asarray(img, dtype=float)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8), lo, hi
    scaled = np.clip((img - lo) / (hi - lo), 0, 1)
    return np.round(scaled * 255).astype(np.uint8), lo, hi


def log_scale(mag: np.ndarray, dynamic_range: float = 1e3) -> np.ndarray:
    peak = float(mag.max())
    if peak <= 0:
        return np.zeros_like(mag, dtype=float)
    return np.log10(1 + dynamic_range * mag / peak)


def write_gray(path: str | os.PathLike, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"expected a 2D uint8 image, got {img.dtype} {img.shape}")
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(img, mode="L").save(path)
        return
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos + 1).reshape(height, width)
