"""Unrolled reconstruction: learned denoiser steps alternating with hard data fidelity.

A cascade maps the current image to a denoised estimate with a small network
working on the two-channel (real, imag) representation, then replaces the
sampled k-space of that estimate with the measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .dmlp import DmlpConfig, DmlpModule
from .fourier import apply_mask_complement, fft_centered, ifft_centered, sense_adjoint
from .layers import Params, Sequential, conv1d_block, conv_block
from .volume import Axis, ShapeError, channels_to_complex, complex_to_channels

MULTI_COIL = "multi_coil"
SINGLE_COIL = "single_coil"

VARIANTS = (
    "SC-CNN",
    "MC-CNN",
    "MC-CNN-dMLP",
    "MC-CNN-1DCNN-L",
    "MC-dMLP",
    "MC-1DCNN",
    "MC-1DCNN-L",
)

LARGE_KERNEL = 64
SMALL_KERNEL = 3


class UnknownVariant(ValueError):
    pass


# -- data fidelity -----------------------------------------------------------

def _check_df(z: np.ndarray, y: np.ndarray, sens: np.ndarray, mask: np.ndarray) -> None:
    if sens.shape[1:] != z.shape or y.shape != sens.shape:
        raise ShapeError(f"inconsistent dims: z {z.shape}, y {y.shape}, sens {sens.shape}")
    if mask.shape != z.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match (pe, spe) of {z.shape}")


def df_linear(z: np.ndarray, sens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``S^H F^H (I - M) F S z``: the z-dependent part of the DF step (self-adjoint)."""
    k = apply_mask_complement(fft_centered(sens * z), mask)
    return np.sum(np.conj(sens) * ifft_centered(k), axis=0)


def df_step(z: np.ndarray, y: np.ndarray, sens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``S^H F^H [(I - M) F S z + y]``."""
    _check_df(z, y, sens, mask)
    k = apply_mask_complement(fft_centered(sens * z), mask) + y
    return np.sum(np.conj(sens) * ifft_centered(k), axis=0)


# -- configuration -----------------------------------------------------------

@dataclass
class CascadeConfig:
    layers: list[dict] = field(default_factory=list)
    n_cascades: int = 5
    df: str = MULTI_COIL
    share_weights: bool = False
    variant: str | None = None

    def to_dict(self) -> dict:
        return {"layers": self.layers, "n_cascades": self.n_cascades, "df": self.df,
                "share_weights": self.share_weights, "variant": self.variant}

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        return cls(**d)


def build_layer(spec: dict):
    kind = spec["type"]
    if kind == "conv_block":
        return conv_block(spec.get("depth", 5), spec.get("channels", 16), tuple(spec.get("kernel", (3, 3, 3))))
    if kind == "conv1d":
        return conv1d_block(Axis.parse(spec["axis"]), spec["kernel_len"], spec.get("channels", 16),
                            spec.get("depth", 3))
    if kind == "dmlp":
        cfg = {k: v for k, v in spec.items() if k != "type"}
        return DmlpModule(DmlpConfig.from_dict(cfg))
    raise ValueError(f"unknown layer type {kind!r}")


def build_network(config: CascadeConfig) -> Sequential:
    return Sequential([build_layer(s) for s in config.layers])


def expand_variant(name: str, scale: str = "desk") -> CascadeConfig:
    """Cascade configuration for one of the seven named strategies."""
    if name not in VARIANTS:
        raise UnknownVariant(f"unknown variant {name!r}; valid names: {', '.join(VARIANTS)}")
    if scale not in ("desk", "full"):
        raise ValueError(f"scale must be 'desk' or 'full', got {scale!r}")
    cnn_channels = 16 if scale == "desk" else 32
    patch_len = 8 if scale == "desk" else 64

    cnn = {"type": "conv_block", "depth": 5, "channels": cnn_channels, "kernel": [3, 3, 3]}

    def dmlp(axis):
        return {"type": "dmlp", "axis": axis, "p_spatial": patch_len, "channels": [2, 16, 16, 16, 2],
                "shifts": [patch_len // 2] * 4, "residual": True, "activation": "relu"}

    def conv1d(axis, k):
        return {"type": "conv1d", "axis": axis, "kernel_len": k, "channels": 16, "depth": 3}

    layers = {
        "SC-CNN": [cnn],
        "MC-CNN": [cnn],
        "MC-CNN-dMLP": [cnn, dmlp("pe"), dmlp("spe")],
        "MC-CNN-1DCNN-L": [cnn, conv1d("pe", LARGE_KERNEL), conv1d("spe", LARGE_KERNEL)],
        "MC-dMLP": [dmlp("ro"), dmlp("pe"), dmlp("spe")],
        "MC-1DCNN": [conv1d(a, SMALL_KERNEL) for a in ("ro", "pe", "spe")],
        "MC-1DCNN-L": [conv1d(a, LARGE_KERNEL) for a in ("ro", "pe", "spe")],
    }[name]
    df = SINGLE_COIL if name == "SC-CNN" else MULTI_COIL
    return CascadeConfig(layers=layers, n_cascades=5, df=df, variant=name)


# -- the unrolled model ------------------------------------------------------

class UnrolledNet:
    """Parameters live in one flat dict keyed ``cascade<i>.<layer path>``."""

    def __init__(self, config: CascadeConfig):
        self.config = config
        self.net = build_network(config)

    def _key(self, i: int) -> str:
        return "cascade0" if self.config.share_weights else f"cascade{i}"

    def init(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        params = {}
        n = 1 if self.config.share_weights else self.config.n_cascades
        for i in range(n):
            params.update({f"cascade{i}.{k}": v for k, v in self.net.init(rng, dtype).items()})
        return params

    def _sub(self, params: Params, i: int) -> Params:
        prefix = self._key(i) + "."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    def _run(self, params, x0, y, sens, mask, dtype):
        xs = x0
        records = []
        for i in range(self.config.n_cascades):
            sub = self._sub(params, i)
            z_c, cache = self.net.forward(sub, complex_to_channels(xs).astype(dtype, copy=False))
            xs = df_step(channels_to_complex(z_c), y, sens, mask)
            records.append(cache)
        return xs, records

    def _back(self, params, records, sens, mask, g, grads):
        for i in reversed(range(self.config.n_cascades)):
            sub = self._sub(params, i)
            gz = df_linear(g, sens, mask)
            gin, sub_grads = self.net.backward(sub, records[i], complex_to_channels(gz).astype(_param_dtype(params)))
            key = self._key(i)
            for k, v in sub_grads.items():
                name = f"{key}.{k}"
                grads[name] = grads[name] + v if name in grads else v
            g = channels_to_complex(gin)
        return g

    def forward(self, params: Params, y: np.ndarray, sens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, Any]:
        """Reconstruct from k-space; returns the image and a record for :meth:`backward`."""
        dtype = _param_dtype(params)
        if self.config.df == SINGLE_COIL:
            ones = np.ones((1, *sens.shape[1:]), dtype=sens.dtype)
            coils, records = [], []
            for c in range(sens.shape[0]):
                yc = y[c:c + 1]
                x0 = sense_adjoint(yc, ones, mask)
                xc, rec = self._run(params, x0, yc, ones, mask, dtype)
                coils.append(xc)
                records.append(rec)
            out = np.sum(np.conj(sens) * np.stack(coils), axis=0)
            return out, (records, sens, mask)
        x0 = sense_adjoint(y, sens, mask)
        out, rec = self._run(params, x0, y, sens, mask, dtype)
        return out, (rec, sens, mask)

    def backward(self, params: Params, record, grad_out: np.ndarray, return_input_grad: bool = False):
        """Parameter gradients for a real loss whose gradient w.r.t. the output is ``grad_out``.

        ``grad_out`` packs the real-part and imaginary-part derivatives as
        ``dL/dRe + 1j * dL/dIm``. Parameters a configuration never touches get
        exact zeros. With ``return_input_grad`` the gradient w.r.t. the
        zero-filled starting image is returned too (one per coil in the
        single-coil mode).
        """
        records, sens, mask = record
        grads: Params = {}
        if self.config.df == SINGLE_COIL:
            ones = np.ones((1, *sens.shape[1:]), dtype=sens.dtype)
            g0 = np.stack([self._back(params, records[c], ones, mask, sens[c] * grad_out, grads)
                           for c in range(sens.shape[0])])
        else:
            g0 = self._back(params, records, sens, mask, grad_out, grads)
        for k, v in params.items():
            grads[k] = grads[k].astype(v.dtype, copy=False) if k in grads else np.zeros_like(v)
        return (grads, g0) if return_input_grad else grads

    def reconstruct(self, params: Params, y, sens, mask) -> np.ndarray:
        return self.forward(params, y, sens, mask)[0]


def _param_dtype(params: Params):
    for v in params.values():
        return v.dtype
    return np.float64


def cascade_forward(y, sens, mask, config: CascadeConfig, params: Params):
    return UnrolledNet(config).forward(params, y, sens, mask)


def cascade_backward(config: CascadeConfig, params: Params, record, upstream: np.ndarray) -> Params:
    return UnrolledNet(config).backward(params, record, upstream)


def zero_filled(y: np.ndarray, sens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return sense_adjoint(y, sens, mask)
