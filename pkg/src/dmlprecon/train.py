"""Training loop, optimizer, dataset manifests and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cvol
from .metrics import InfinitePSNR, psnr, ssim
from .recon import CascadeConfig, UnrolledNet, expand_variant, zero_filled
from .sim import SimSample
from .volume import ShapeError

logger = logging.getLogger(__name__)

PRECISIONS = {"f32": (np.float32, np.complex64), "f64": (np.float64, np.complex128)}


class NonFiniteLoss(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of ``|pred - target|^2`` over voxels, and its gradient ``2 (pred - target) / n``.

    The gradient packs real and imaginary derivatives as ``dRe + 1j dIm``.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff.real**2 + diff.imag**2) / n), 2 * diff / n


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name in sorted(params):
            p, g = params[name], grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- datasets ----------------------------------------------------------------

MANIFEST_VERSION = 1
_FIELDS = ("ground_truth", "sens", "mask", "kspace")


def write_sample(sample: SimSample, directory: str | os.PathLike, stem: str) -> dict:
    """Write one sample as CVOL files; returns its manifest entry (paths relative to ``directory``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entry = {"seed": int(sample.seed)}
    for name in _FIELDS:
        rel = f"{stem}_{name}.cvol"
        value = getattr(sample, name)
        cvol.write_volume(value.astype(np.uint8) if name == "mask" else value, directory / rel)
        entry[name] = rel
    return entry


def write_manifest(path: str | os.PathLike, entries: list[dict]) -> None:
    doc = {"version": MANIFEST_VERSION, "samples": entries}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | os.PathLike) -> list[SimSample]:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')}")
    base = path.parent
    samples = []
    for entry in doc["samples"]:
        arrays = {}
        for name in _FIELDS:
            arrays[name] = cvol.read_mask(base / entry[name]) if name == "mask" else cvol.read_volume(base / entry[name])
        samples.append(SimSample(arrays["ground_truth"], arrays["sens"], arrays["mask"], arrays["kspace"],
                                 entry.get("seed", 0)))
    return samples


# -- training ----------------------------------------------------------------

@dataclass
class TrainSpec:
    variant: str
    manifest: str | None = None
    steps: int = 100
    batch_size: int = 1
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    precision: str = "f32"
    scale: str = "desk"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")


@dataclass
class TrainResult:
    config: CascadeConfig
    params: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)


def _cast(sample: SimSample, ctype) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (sample.kspace.astype(ctype), sample.sens.astype(ctype), np.asarray(sample.mask, dtype=bool),
            sample.ground_truth.astype(ctype))


def train(spec: TrainSpec, samples: list[SimSample] | None = None,
          config: CascadeConfig | None = None) -> TrainResult:
    """Deterministic training: same spec and data give bit-identical parameters."""
    if samples is None:
        if spec.manifest is None:
            raise ValueError("either samples or a manifest path is required")
        samples = load_manifest(spec.manifest)
    if not samples:
        raise ValueError("empty dataset")
    config = config or expand_variant(spec.variant, spec.scale)
    rtype, ctype = PRECISIONS[spec.precision]
    net = UnrolledNet(config)
    rng = np.random.default_rng(spec.seed)
    params = net.init(rng, rtype)
    opt = Adam(spec.lr, spec.betas[0], spec.betas[1], spec.eps)
    data = [_cast(s, ctype) for s in samples]

    order: list[int] = []
    losses = []
    for step in range(spec.steps):
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        for _ in range(spec.batch_size):
            if not order:
                order = list(rng.permutation(len(data)))
            y, sens, mask, truth = data[order.pop(0)]
            pred, record = net.forward(params, y, sens, mask)
            loss, gpred = loss_mse(pred, truth)
            if not np.isfinite(loss):
                raise NonFiniteLoss(step, loss)
            total += loss
            for k, g in net.backward(params, record, gpred).items():
                grads[k] = grads[k] + g if k in grads else g
        if spec.batch_size > 1:
            grads = {k: g / spec.batch_size for k, g in grads.items()}
        losses.append(total / spec.batch_size)
        opt.step(params, grads)
        if step % 50 == 0 or step == spec.steps - 1:
            logger.info("step %d loss %.6g", step, losses[-1])
    return TrainResult(config, params, losses)


def write_loss_csv(path: str | os.PathLike, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


# -- evaluation --------------------------------------------------------------

@dataclass
class MetricReport:
    ssim: list[float]
    psnr: list[float]
    zero_filled_ssim: list[float] = field(default_factory=list)
    zero_filled_psnr: list[float] = field(default_factory=list)

    @staticmethod
    def _agg(values: list[float]) -> dict:
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            return {"mean": None, "std": None}
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    def to_dict(self) -> dict:
        out = {"per_volume": {"ssim": self.ssim, "psnr": self.psnr}}
        out["aggregate"] = {"ssim": self._agg(self.ssim), "psnr": self._agg(self.psnr)}
        if self.zero_filled_psnr:
            out["zero_filled"] = {
                "per_volume": {"ssim": self.zero_filled_ssim, "psnr": self.zero_filled_psnr},
                "aggregate": {"ssim": self._agg(self.zero_filled_ssim), "psnr": self._agg(self.zero_filled_psnr)},
            }
        return out

    def table(self) -> str:
        rows = [f"{'volume':>8} {'SSIM':>8} {'PSNR':>9}"]
        for i, (s, p) in enumerate(zip(self.ssim, self.psnr)):
            rows.append(f"{i:>8d} {s:8.4f} {p:9.3f}")
        agg = self.to_dict()["aggregate"]
        rows.append(f"{'mean':>8} {agg['ssim']['mean']:8.4f} {agg['psnr']['mean']:9.3f}")
        if self.zero_filled_psnr:
            zf = self.to_dict()["zero_filled"]["aggregate"]
            rows.append(f"{'zero-fill':>8} {zf['ssim']['mean']:8.4f} {zf['psnr']['mean']:9.3f}")
        return "\n".join(rows)


def magnitude_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    ref, test = np.abs(truth), np.abs(pred)
    try:
        p = psnr(ref, test)
    except InfinitePSNR:
        p = float("inf")
    return ssim(ref, test), p


def evaluate(config: CascadeConfig, params: dict[str, np.ndarray], samples: list[SimSample]) -> MetricReport:
    net = UnrolledNet(config)
    dtype = next(iter(params.values())).dtype if params else np.float64
    ctype = np.complex64 if dtype == np.float32 else np.complex128
    report = MetricReport([], [], [], [])
    for s in samples:
        y, sens, mask, truth = _cast(s, ctype)
        pred = net.reconstruct(params, y, sens, mask)
        a, b = magnitude_metrics(pred, truth)
        report.ssim.append(a)
        report.psnr.append(b)
        a, b = magnitude_metrics(zero_filled(y, sens, mask), truth)
        report.zero_filled_ssim.append(a)
        report.zero_filled_psnr.append(b)
    return report
