"""Dynamic MLP: patch-wise FC blocks with circular window shifts.

The operator accepts any length along its axis: the input is wrap-padded to
a multiple of the patch length, passed through FC blocks (patch, shared
affine map, activation, unpatch, circular shift), shifted back by the total
shift, and cropped to the original size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import IDENTITY, RELU, Module, activation_backward, activation_forward, glorot
from .volume import (
    Axis,
    ShapeError,
    check_channel_volume,
    circular_pad,
    circular_shift,
    crop_pad,
    fold_pad,
    patch,
    unpatch_as,
)


@dataclass
class FcBlockParams:
    weight: np.ndarray  # (P_out, P_in)
    bias: np.ndarray  # (P_out,)
    activation: str = RELU
    slope: float = 0.1


@dataclass
class DmlpConfig:
    axis: Axis = Axis.PE
    p_spatial: int = 8
    channels: list[int] = field(default_factory=lambda: [2, 16, 16, 16, 2])
    shifts: list[int] | None = None
    residual: bool = True
    activation: str = RELU

    def __post_init__(self):
        self.axis = Axis.parse(self.axis)
        if self.shifts is None:
            self.shifts = [self.p_spatial // 2] * self.n_blocks
        self.shifts = [int(s) for s in self.shifts]
        if len(self.shifts) != self.n_blocks:
            raise ValueError(f"need {self.n_blocks} shifts, got {len(self.shifts)}")
        if self.p_spatial > 1 and any(not 0 < s < self.p_spatial for s in self.shifts):
            raise ValueError(f"shifts {self.shifts} must lie strictly between 0 and p={self.p_spatial}")

    @property
    def n_blocks(self) -> int:
        return len(self.channels) - 1

    def activations(self) -> list[str]:
        # linear output head
        return [self.activation] * (self.n_blocks - 1) + [IDENTITY]

    def to_dict(self) -> dict:
        return {"axis": self.axis.name.lower(), "p_spatial": self.p_spatial, "channels": list(self.channels),
                "shifts": list(self.shifts), "residual": self.residual, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "DmlpConfig":
        return cls(**d)


def init_params(cfg: DmlpConfig, rng: np.random.Generator, dtype=np.float32) -> list[FcBlockParams]:
    """Glorot weights and zero biases; a residual module gets a zero output block so it starts as the identity."""
    out = []
    for n, act in enumerate(cfg.activations()):
        p_in = cfg.channels[n] * cfg.p_spatial
        p_out = cfg.channels[n + 1] * cfg.p_spatial
        w = glorot(rng, (p_out, p_in), p_in, p_out, dtype)
        if n == cfg.n_blocks - 1 and _has_skip(cfg):
            w[...] = 0
        out.append(FcBlockParams(w, np.zeros(p_out, dtype=dtype), act))
    return out


def identity_params(cfg: DmlpConfig, dtype=np.float64) -> list[FcBlockParams]:
    widths = {c for c in cfg.channels}
    if len(widths) != 1:
        raise ValueError("identity parameters need a constant channel width")
    p = cfg.channels[0] * cfg.p_spatial
    return [FcBlockParams(np.eye(p, dtype=dtype), np.zeros(p, dtype=dtype), IDENTITY) for _ in range(cfg.n_blocks)]


def _block_forward(x, params: FcBlockParams, cfg: DmlpConfig, n: int, shift: int | None = None):
    m = patch(x, cfg.axis, cfg.p_spatial)
    if params.weight.shape[1] != m.p:
        raise ShapeError(f"block {n}: weight expects patch length {params.weight.shape[1]}, input gives {m.p}")
    pre = params.weight @ m.data + params.bias[:, None]
    act = activation_forward(pre, params.activation, params.slope)
    y = unpatch_as(act, cfg.axis, cfg.p_spatial, x.shape[1:])
    shift = cfg.shifts[n] if shift is None else shift
    return circular_shift(y, cfg.axis, shift), (m.data, pre)


def fc_block_forward(x: np.ndarray, params: FcBlockParams, cfg: DmlpConfig, n: int,
                     shift: int | None = None) -> np.ndarray:
    """One FC block on a pre-padded volume: patch, affine, activation, unpatch, shift.

    ``shift`` overrides ``cfg.shifts[n]`` (any integer, including 0).
    """
    check_channel_volume(x)
    return _block_forward(x, params, cfg, n, shift)[0]


def _block_backward(params: FcBlockParams, cfg: DmlpConfig, n: int, cache, g: np.ndarray, in_channels: int):
    cols, pre = cache
    spatial = g.shape[1:]
    g = circular_shift(g, cfg.axis, -cfg.shifts[n])
    gact = patch(g, cfg.axis, cfg.p_spatial).data
    gpre = activation_backward(pre, gact, params.activation, params.slope)
    gw = gpre @ cols.T
    gb = gpre.sum(axis=1)
    gcols = params.weight.T @ gpre
    gx = unpatch_as(gcols, cfg.axis, cfg.p_spatial, spatial)
    assert gx.shape[0] == in_channels
    return gx, gw, gb


def _has_skip(cfg: DmlpConfig) -> bool:
    return cfg.residual and cfg.channels[0] == cfg.channels[-1]


def _forward(x, params, cfg):
    check_channel_volume(x)
    if len(params) != cfg.n_blocks:
        raise ShapeError(f"expected {cfg.n_blocks} blocks, got {len(params)}")
    if x.shape[0] != cfg.channels[0]:
        raise ShapeError(f"dMLP expects {cfg.channels[0]} channels, got {x.shape[0]}")
    h, pad = circular_pad(x, cfg.axis, cfg.p_spatial)
    caches = []
    for n, bp in enumerate(params):
        h, c = _block_forward(h, bp, cfg, n)
        caches.append(c)
    h = circular_shift(h, cfg.axis, -sum(cfg.shifts))
    y = crop_pad(h, cfg.axis, pad)
    if _has_skip(cfg):
        y = y + x
    return y, (x.shape, pad, caches)


def dmlp_forward(x: np.ndarray, params: list[FcBlockParams], cfg: DmlpConfig) -> np.ndarray:
    return _forward(x, params, cfg)[0]


def _backward(params, cfg, cache, g):
    shape, pad, caches = cache
    if g.shape != (cfg.channels[-1], *shape[1:]):
        raise ShapeError(f"upstream gradient {g.shape} does not match dMLP output")
    n_axis = shape[cfg.axis + 1]
    # crop backward: gradient lands on the first N entries, padded tail gets zero
    widths = [(0, 0)] * 4
    widths[cfg.axis + 1] = (0, pad)
    h = np.pad(g, widths)
    h = circular_shift(h, cfg.axis, sum(cfg.shifts))
    grads = [None] * len(params)
    for n in reversed(range(len(params))):
        h, gw, gb = _block_backward(params[n], cfg, n, caches[n], h, cfg.channels[n])
        grads[n] = (gw, gb)
    gx = fold_pad(h, cfg.axis, n_axis)
    if _has_skip(cfg):
        gx = gx + g
    return gx, grads


def dmlp_backward(x: np.ndarray, params: list[FcBlockParams], cfg: DmlpConfig, upstream: np.ndarray):
    """Returns ``(input_grad, [(weight_grad, bias_grad) per block])``."""
    _, cache = _forward(x, params, cfg)
    return _backward(params, cfg, cache, upstream)


class DmlpModule(Module):
    """Network-layer wrapper exposing parameters as ``blocks.<n>.weight|bias``."""

    def __init__(self, cfg: DmlpConfig):
        self.cfg = cfg

    def _blocks(self, params):
        acts = self.cfg.activations()
        return [FcBlockParams(params[f"blocks.{n}.weight"], params[f"blocks.{n}.bias"], acts[n])
                for n in range(self.cfg.n_blocks)]

    def init(self, rng, dtype=np.float32):
        out = {}
        for n, bp in enumerate(init_params(self.cfg, rng, dtype)):
            out[f"blocks.{n}.weight"] = bp.weight
            out[f"blocks.{n}.bias"] = bp.bias
        return out

    def forward(self, params, x):
        return _forward(x, self._blocks(params), self.cfg)

    def backward(self, params, cache, gy):
        gx, grads = _backward(self._blocks(params), self.cfg, cache, gy)
        out = {}
        for n, (gw, gb) in enumerate(grads):
            out[f"blocks.{n}.weight"] = gw
            out[f"blocks.{n}.bias"] = gb
        return gx, out

    def config(self):
        return {"type": "dmlp", **self.cfg.to_dict()}
