"""Volume conventions and the shape-manipulation primitives used by the dMLP.

Arrays follow a fixed layout:

* complex volume   ``(n_ro, n_pe, n_spe)``, complex
* multi-coil image ``(n_coils, n_ro, n_pe, n_spe)``, complex
* channel volume   ``(n_channels, n_ro, n_pe, n_spe)``, real

Axis arguments always refer to the spatial axes (``RO``, ``PE``, ``SPE``);
in a channel volume the spatial axis ``a`` lives at array axis ``a + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Axis(IntEnum):
    RO = 0
    PE = 1
    SPE = 2

    @classmethod
    def parse(cls, value: "Axis | int | str") -> "Axis":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown axis {value!r}; expected ro, pe or spe") from None
        return cls(int(value))


class ShapeError(ValueError):
    """Raised when array dimensions are inconsistent with an operation."""


def check_channel_volume(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected (channels, ro, pe, spe), got shape {x.shape}")
    if np.iscomplexobj(x):
        raise ShapeError(f"{name}: channel volumes are real-valued")


def check_complex_volume(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"{name}: expected (ro, pe, spe), got shape {x.shape}")


@dataclass(frozen=True)
class PatchMatrix:
    """Columns are patch vectors (length ``p``), one per patch (``q`` of them).

    ``origin_shape`` is the channel-volume shape the matrix was cut from and
    ``axis`` / ``p_spatial`` record how, so :func:`unpatch` can invert it.
    """

    data: np.ndarray
    axis: Axis
    p_spatial: int
    origin_shape: tuple[int, int, int, int]

    @property
    def p(self) -> int:
        return self.data.shape[0]

    @property
    def q(self) -> int:
        return self.data.shape[1]


def patch(x: np.ndarray, axis: Axis | int, p_spatial: int) -> PatchMatrix:
    """Cut ``x`` into non-overlapping 1D patches along ``axis``.

    Each column holds one patch with all channels concatenated channel-major,
    so ``P = n_channels * p_spatial``. Columns are ordered lexicographically
    over the non-patched spatial indices, then by patch index along ``axis``.
    """
    check_channel_volume(x)
    axis = Axis(axis)
    n = x.shape[axis + 1]
    if p_spatial < 1 or n % p_spatial:
        raise ShapeError(f"unpadded input: axis {axis.name} has size {n}, not divisible by {p_spatial}")
    c = x.shape[0]
    moved = np.moveaxis(x, axis + 1, -1)  # (C, A, B, N)
    a, b = moved.shape[1:3]
    k = n // p_spatial
    blocks = moved.reshape(c, a, b, k, p_spatial).transpose(0, 4, 1, 2, 3)
    data = blocks.reshape(c * p_spatial, a * b * k)
    return PatchMatrix(data, axis, p_spatial, tuple(x.shape))


def unpatch_as(data: np.ndarray, axis: Axis | int, p_spatial: int, spatial: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`patch` for a matrix whose channel count may differ.

    The channel count is inferred from ``data.shape[0] / p_spatial``; this is
    how the FC blocks re-form feature maps with a new width.
    """
    axis = Axis(axis)
    p, q = data.shape
    if p % p_spatial:
        raise ShapeError(f"patch length {p} is not a multiple of p_spatial={p_spatial}")
    c = p // p_spatial
    n = spatial[axis]
    if n % p_spatial or q * p_spatial != int(np.prod(spatial)):
        raise ShapeError(f"patch matrix {data.shape} is inconsistent with spatial dims {spatial}")
    others = [spatial[i] for i in range(3) if i != axis]
    k = n // p_spatial
    blocks = data.reshape(c, p_spatial, others[0], others[1], k).transpose(0, 2, 3, 4, 1)
    moved = blocks.reshape(c, others[0], others[1], n)
    return np.moveaxis(moved, -1, axis + 1)


def unpatch(m: PatchMatrix) -> np.ndarray:
    c = m.origin_shape[0]
    if m.p * m.q != int(np.prod(m.origin_shape)) or m.p != c * m.p_spatial:
        raise ShapeError(f"patch matrix {m.data.shape} does not match origin shape {m.origin_shape}")
    return unpatch_as(m.data, m.axis, m.p_spatial, m.origin_shape[1:])


def pad_length(n: int, p_spatial: int) -> int:
    return (p_spatial - n % p_spatial) % p_spatial


def circular_pad(x: np.ndarray, axis: Axis | int, p_spatial: int) -> tuple[np.ndarray, int]:
    """Extend ``axis`` to the next multiple of ``p_spatial`` by wrapping its start.

    Returns the padded volume and the number of appended entries.
    """
    check_channel_volume(x)
    axis = Axis(axis)
    n = x.shape[axis + 1]
    pad = pad_length(n, p_spatial)
    if pad == 0:
        return x.copy(), 0
    widths = [(0, 0)] * 4
    widths[axis + 1] = (0, pad)
    # np.pad's wrap mode handles pad > n by repeated tiling
    return np.pad(x, widths, mode="wrap"), pad


def crop_pad(x: np.ndarray, axis: Axis | int, pad_len: int) -> np.ndarray:
    check_channel_volume(x)
    axis = Axis(axis)
    n = x.shape[axis + 1]
    if pad_len < 0 or pad_len >= n:
        raise ShapeError(f"cannot crop {pad_len} entries from axis {axis.name} of size {n}")
    if pad_len == 0:
        return x.copy()
    index = [slice(None)] * 4
    index[axis + 1] = slice(0, n - pad_len)
    return x[tuple(index)].copy()


def fold_pad(g: np.ndarray, axis: Axis | int, n: int) -> np.ndarray:
    """Adjoint of :func:`circular_pad`: sum padded copies back onto their sources."""
    axis = Axis(axis)
    moved = np.moveaxis(g, axis + 1, 0)
    out = moved[:n].copy()
    for start in range(n, moved.shape[0], n):
        chunk = moved[start:start + n]
        out[: chunk.shape[0]] += chunk
    return np.moveaxis(out, 0, axis + 1)


def circular_shift(x: np.ndarray, axis: Axis | int, s: int) -> np.ndarray:
    """``out[i] = in[(i - s) mod N]`` along ``axis``; content moves toward higher indices for s > 0."""
    check_channel_volume(x)
    return np.roll(x, int(s), axis=Axis(axis) + 1)


def complex_to_channels(x: np.ndarray) -> np.ndarray:
    check_complex_volume(x)
    return np.stack([x.real, x.imag])


def channels_to_complex(c: np.ndarray) -> np.ndarray:
    check_channel_volume(c, "c")
    if c.shape[0] != 2:
        raise ShapeError(f"expected 2 channels (real, imag), got {c.shape[0]}")
    return c[0] + 1j * c[1]
