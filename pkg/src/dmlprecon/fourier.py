"""Centered unitary FFTs, Cartesian masking and SENSE encoding.

k-space is centered: the zero frequency sits at index ``N // 2`` on every
axis. Masks are boolean ``(n_pe, n_spe)`` arrays broadcast along RO.
"""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .volume import ShapeError

ALL_AXES = (0, 1, 2)


def _axes(x: np.ndarray, axes: Iterable[int]) -> tuple[int, ...]:
    # spatial axes are always the trailing three
    return tuple(x.ndim - 3 + int(a) for a in axes)


def fft_centered(x: np.ndarray, axes: Iterable[int] = ALL_AXES) -> np.ndarray:
    ax = _axes(x, axes)
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(x, axes=ax), axes=ax, norm="ortho"), axes=ax)


def ifft_centered(x: np.ndarray, axes: Iterable[int] = ALL_AXES) -> np.ndarray:
    ax = _axes(x, axes)
    return np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(x, axes=ax), axes=ax, norm="ortho"), axes=ax)


def check_mask(mask: np.ndarray, shape: tuple[int, ...]) -> None:
    if mask.ndim != 2 or tuple(mask.shape) != tuple(shape[-2:]):
        raise ShapeError(f"mask dims {mask.shape} do not match (pe, spe) = {tuple(shape[-2:])}")


def apply_mask(k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    check_mask(mask, k.shape)
    return np.where(mask, k, 0)


def apply_mask_complement(k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    check_mask(mask, k.shape)
    return np.where(mask, 0, k)


def _check_sense(x_shape: tuple[int, ...], sens: np.ndarray) -> None:
    if sens.ndim != 4 or tuple(sens.shape[1:]) != tuple(x_shape):
        raise ShapeError(f"sensitivities {sens.shape} do not match image dims {x_shape}")


def sense_forward(x: np.ndarray, sens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Coil-split, transform and mask: ``M F S x``."""
    _check_sense(x.shape, sens)
    return apply_mask(fft_centered(sens * x), mask)


def sense_adjoint(y: np.ndarray, sens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``S^H F^H M y``, summing coils in index order."""
    _check_sense(y.shape[1:], sens)
    if y.shape != sens.shape:
        raise ShapeError(f"k-space {y.shape} does not match sensitivities {sens.shape}")
    return np.sum(np.conj(sens) * ifft_centered(apply_mask(y, mask)), axis=0)


def psf_of_mask(mask: np.ndarray, n_ro: int) -> np.ndarray:
    """Image-domain kernel equivalent to multiplying k-space by ``mask``.

    Zero-filling with this mask equals circular convolution of the image with
    the returned kernel centered at ``(n_ro//2, n_pe//2, n_spe//2)``. The
    center tap and the kernel energy both equal the sampled fraction.
    """
    indicator = np.broadcast_to(mask.astype(float), (n_ro, *mask.shape))
    return ifft_centered(indicator) / np.sqrt(indicator.size)
