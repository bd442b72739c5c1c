"""Layers with explicit forward/backward passes.

Every module works on channel volumes ``(C, ro, pe, spe)`` and follows the
same small protocol::

    params = module.init(rng, dtype)              # dict[str, ndarray]
    y, cache = module.forward(params, x)
    gx, grads = module.backward(params, cache, gy)

Composite modules namespace their children's parameters with ``"<i>."``
prefixes so a whole network is a single flat ``dict``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .volume import ShapeError, check_channel_volume

Params = dict[str, np.ndarray]

RELU = "relu"
LEAKY_RELU = "leaky_relu"
IDENTITY = "identity"


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def activation_forward(x: np.ndarray, kind: str, slope: float = 0.1) -> np.ndarray:
    if kind == RELU:
        return np.maximum(x, 0)
    if kind == LEAKY_RELU:
        return np.where(x > 0, x, slope * x)
    if kind == IDENTITY:
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, g: np.ndarray, kind: str, slope: float = 0.1) -> np.ndarray:
    """Gradient through the activation; the derivative at 0 is the left limit."""
    if kind == RELU:
        return np.where(x > 0, g, 0)
    if kind == LEAKY_RELU:
        return np.where(x > 0, g, slope * g)
    if kind == IDENTITY:
        return g
    raise ValueError(f"unknown activation {kind!r}")


class Module:
    def init(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        return {}

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, params: Params, cache: Any, gy: np.ndarray) -> tuple[np.ndarray, Params]:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


@dataclass
class Activation(Module):
    kind: str = RELU
    slope: float = 0.1

    def forward(self, params, x):
        return activation_forward(x, self.kind, self.slope), x

    def backward(self, params, cache, gy):
        return activation_backward(cache, gy, self.kind, self.slope), {}

    def config(self):
        return {"type": "activation", "kind": self.kind, "slope": self.slope}


def kernel_center(k: int) -> int:
    """Tap aligned with the output voxel: k//2 for odd k, k/2 - 1 for even k."""
    return (k - 1) // 2


def _fold_axis(g: np.ndarray, axis: int, n: int, left: int) -> np.ndarray:
    # padded index u holds source (u - left) mod n
    moved = np.moveaxis(g, axis, 0)
    out = np.zeros((n, *moved.shape[1:]), dtype=g.dtype)
    for u in range(moved.shape[0]):
        out[(u - left) % n] += moved[u]
    return np.moveaxis(out, 0, axis)


class _ConvGeometry:
    """Flat-offset layout for circular correlation on a wrap-padded grid.

    The input is wrap-padded so each kernel tap becomes a constant offset in
    the flattened padded array; every tap is then one matrix product against a
    contiguous slice. Outputs are computed on a superset of flat positions and
    the valid voxels gathered afterwards.
    """

    def __init__(self, spatial: tuple[int, int, int], ksize: tuple[int, int, int]):
        self.spatial = spatial
        self.ksize = ksize
        self.left = tuple(kernel_center(k) for k in ksize)
        self.right = tuple(k - 1 - c for k, c in zip(ksize, self.left))
        self.padded = tuple(n + k - 1 for n, k in zip(spatial, ksize))
        p0, p1, p2 = self.padded
        self.strides = (p1 * p2, p2, 1)
        n0, n1, n2 = spatial
        self.length = (n0 - 1) * self.strides[0] + (n1 - 1) * self.strides[1] + n2
        self.offsets = [a * self.strides[0] + b * self.strides[1] + c
                        for a in range(ksize[0]) for b in range(ksize[1]) for c in range(ksize[2])]

    def pad(self, x: np.ndarray) -> np.ndarray:
        widths = [(0, 0)] + [(l, r) for l, r in zip(self.left, self.right)]
        return np.pad(x, widths, mode="wrap").reshape(x.shape[0], -1)

    def gather(self, full: np.ndarray) -> np.ndarray:
        c = full.shape[0]
        buf = np.zeros((c, int(np.prod(self.padded))), dtype=full.dtype)
        buf[:, : self.length] = full
        n0, n1, n2 = self.spatial
        return buf.reshape(c, *self.padded)[:, :n0, :n1, :n2]

    def scatter(self, g: np.ndarray) -> np.ndarray:
        c = g.shape[0]
        buf = np.zeros((c, *self.padded), dtype=g.dtype)
        n0, n1, n2 = self.spatial
        buf[:, :n0, :n1, :n2] = g
        return buf.reshape(c, -1)[:, : self.length]

    def fold(self, gpad: np.ndarray) -> np.ndarray:
        g = gpad.reshape(gpad.shape[0], *self.padded)
        for ax in range(3):
            g = _fold_axis(g, ax + 1, self.spatial[ax], self.left[ax])
        return g


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Circular cross-correlation, stride 1, same-size output.

    ``y[o, i] = bias[o] + sum_{c, j} kernel[o, c, j] * x[c, (i + j - center) mod N]``.
    Kernels longer than an axis wrap around it.
    """
    return _conv_forward(x, kernel, bias)[0]


def _conv_forward(x, kernel, bias):
    check_channel_volume(x)
    c_out, c_in = kernel.shape[:2]
    if x.shape[0] != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {x.shape[0]}")
    geo = _ConvGeometry(x.shape[1:], kernel.shape[2:])
    flat = geo.pad(x)
    # (taps, c_out, c_in), contiguous per tap so matmul stays on BLAS
    taps = np.ascontiguousarray(kernel.reshape(c_out, c_in, -1).transpose(2, 0, 1))
    full = np.zeros((c_out, geo.length), dtype=np.result_type(x, kernel))
    for t, off in enumerate(geo.offsets):
        full += taps[t] @ flat[:, off: off + geo.length]
    y = geo.gather(full) + bias[:, None, None, None]
    return y, (geo, flat)


def conv_backward(x: np.ndarray, kernel: np.ndarray, upstream: np.ndarray, cache=None):
    """Returns ``(input_grad, kernel_grad, bias_grad)``."""
    if cache is None:
        cache = _conv_forward(x, kernel, np.zeros(kernel.shape[0], kernel.dtype))[1]
    geo, flat = cache
    c_out, c_in = kernel.shape[:2]
    if upstream.shape != (c_out, *geo.spatial):
        raise ShapeError(f"upstream gradient {upstream.shape} does not match conv output")
    taps_t = np.ascontiguousarray(kernel.reshape(c_out, c_in, -1).transpose(2, 1, 0))
    g = geo.scatter(upstream)
    gflat = np.zeros_like(flat)
    gtaps = np.empty((taps_t.shape[0], c_out, c_in), dtype=kernel.dtype)
    for t, off in enumerate(geo.offsets):
        window = flat[:, off: off + geo.length]
        gtaps[t] = g @ window.T
        gflat[:, off: off + geo.length] += taps_t[t] @ g
    gx = geo.fold(gflat)
    gkernel = gtaps.transpose(1, 2, 0).reshape(kernel.shape)
    return gx, gkernel, upstream.sum(axis=(1, 2, 3))


@dataclass
class Conv(Module):
    c_in: int
    c_out: int
    ksize: tuple[int, int, int] = (3, 3, 3)

    def init(self, rng, dtype=np.float32):
        vol = int(np.prod(self.ksize))
        shape = (self.c_out, self.c_in, *self.ksize)
        return {"kernel": glorot(rng, shape, self.c_in * vol, self.c_out * vol, dtype),
                "bias": np.zeros(self.c_out, dtype=dtype)}

    def forward(self, params, x):
        return _conv_forward(x, params["kernel"], params["bias"])

    def backward(self, params, cache, gy):
        gx, gk, gb = conv_backward(None, params["kernel"], gy, cache)
        return gx, {"kernel": gk, "bias": gb}

    def config(self):
        return {"type": "conv", "c_in": self.c_in, "c_out": self.c_out, "ksize": list(self.ksize)}


@dataclass
class Sequential(Module):
    layers: list[Module] = field(default_factory=list)
    residual: bool = False

    def init(self, rng, dtype=np.float32):
        params = {}
        for i, layer in enumerate(self.layers):
            params.update({f"{i}.{k}": v for k, v in layer.init(rng, dtype).items()})
        return params

    def _sub(self, params, i):
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    def forward(self, params, x):
        caches = []
        y = x
        for i, layer in enumerate(self.layers):
            y, c = layer.forward(self._sub(params, i), y)
            caches.append(c)
        if self.residual:
            if y.shape != x.shape:
                raise ShapeError(f"residual needs matching shapes, got {x.shape} -> {y.shape}")
            y = y + x
        return y, caches

    def backward(self, params, cache, gy):
        grads = {}
        g = gy
        for i in reversed(range(len(self.layers))):
            g, sub = self.layers[i].backward(self._sub(params, i), cache[i], g)
            grads.update({f"{i}.{k}": v for k, v in sub.items()})
        if self.residual:
            g = g + gy
        return g, grads

    def config(self):
        return {"type": "sequential", "residual": self.residual, "layers": [m.config() for m in self.layers]}


def conv_block(depth: int = 5, channels: int = 16, ksize=(3, 3, 3), c_io: int = 2, residual: bool = True) -> Sequential:
    """Plain CNN denoiser: conv-relu x (depth-1), then a linear output conv, with a skip."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    widths = [c_io] + [channels] * (depth - 1) + [c_io]
    layers: list[Module] = []
    for i in range(depth):
        layers.append(Conv(widths[i], widths[i + 1], tuple(ksize)))
        if i < depth - 1:
            layers.append(Activation(RELU))
    return Sequential(layers, residual=residual)


def conv1d_block(axis: int, kernel_len: int, channels: int = 16, depth: int = 3, c_io: int = 2,
                 residual: bool = True) -> Sequential:
    """Stack of 1D convolutions oriented along one spatial axis."""
    ksize = [1, 1, 1]
    ksize[int(axis)] = kernel_len
    return conv_block(depth, channels, tuple(ksize), c_io, residual)


# -- gradient checking -------------------------------------------------------

@dataclass
class GradReport:
    step: float
    param_errors: dict[str, float]
    input_error: float | None

    @property
    def max_error(self) -> float:
        errs = list(self.param_errors.values())
        if self.input_error is not None:
            errs.append(self.input_error)
        return max(errs) if errs else 0.0


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def _fd_entries(f: Callable[[], float], arr: np.ndarray, idx: np.ndarray, step: float) -> np.ndarray:
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * step)
    return out


def grad_check(module: Module, params: Params, x: np.ndarray, step: float = 1e-3, seed: int = 0,
               max_entries: int | None = None, check_input: bool = True,
               backward: Callable | None = None) -> GradReport:
    """Compare analytic gradients with central differences on ``L = <module(x), r>``.

    ``r`` is a fixed random projection. Arrays must be float64 for meaningful
    tolerances. ``max_entries`` samples that many entries per tensor.
    ``backward`` overrides the module's own backward (used to test the harness).
    """
    rng = np.random.default_rng(seed)
    y, cache = module.forward(params, x)
    r = rng.standard_normal(y.shape)
    back = backward or module.backward
    gx, grads = back(params, cache, r)

    def loss() -> float:
        return float(np.sum(module.forward(params, x)[0] * r))

    def pick(arr):
        n = arr.size
        if max_entries is None or n <= max_entries:
            return np.arange(n)
        return np.sort(rng.choice(n, max_entries, replace=False))

    errors = {}
    for name, arr in params.items():
        idx = pick(arr)
        fd = _fd_entries(loss, arr, idx, step)
        errors[name] = rel_error(grads[name].reshape(-1)[idx], fd)
    input_err = None
    if check_input:
        x = x.copy()
        idx = pick(x)
        fd = _fd_entries(loss, x, idx, step)
        input_err = rel_error(gx.reshape(-1)[idx], fd)
    return GradReport(step, errors, input_err)
