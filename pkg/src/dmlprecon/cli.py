"""Command-line interface.

Exit codes: 0 success, 2 usage, 3 data/shape failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cvol
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fourier import psf_of_mask
from .imageio import log_scale, to_uint8, write_gray
from .metrics import InfinitePSNR, UndefinedDataRange, psnr, ssim
from .recon import VARIANTS, UnknownVariant, UnrolledNet
from .sim import MaskGenerationError, SimSpec, make_uniform_mask, poisson_disk, simulate
from .train import NonFiniteLoss, TrainSpec, evaluate, load_manifest, train, write_loss_csv, write_manifest, write_sample
from .volume import ShapeError

logger = logging.getLogger("dmlprecon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _ints(text: str, n: int, flag: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{flag}: expected {n} comma-separated integers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{flag}: expected {n} comma-separated integers, got {text!r}")
    return vals


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class Ctx:
    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir) if args.out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, p: str) -> Path:
        p = Path(p)
        if self.out_dir is not None and not p.is_absolute():
            return self.out_dir / p
        return p


# -- subcommands -------------------------------------------------------------

def cmd_mask(ctx: Ctx) -> int:
    a = ctx.args
    dims = _ints(a.dims, 2, "--dims")
    meta = {"type": a.type, "dims": list(dims), "seed": a.seed}
    if a.type == "uniform":
        rates = _ints(a.accel, 2, "--accel") if "," in a.accel else (int(float(a.accel)),) * 2
        center = _ints(a.center, 2, "--center") if a.center else (0, 0)
        mask = make_uniform_mask(dims, rates, center, a.seed)
        meta["rate"] = list(rates)
    else:
        try:
            accel = float(a.accel)
        except ValueError:
            raise UsageError(f"--accel: expected a number, got {a.accel!r}") from None
        center = _ints(a.center, 2, "--center") if a.center else (10, 10)
        mask, radius = poisson_disk(dims, accel, center, a.seed)
        meta["accel_requested"] = accel
        meta["radius"] = radius
    meta["center"] = list(center)
    frac = float(mask.mean())
    meta["sampled_points"] = int(mask.sum())
    meta["sampled_fraction"] = frac
    meta["achieved_accel"] = 1.0 / frac
    out = ctx.path(a.out)
    cvol.write_volume(mask.astype(np.uint8), out)
    _write_json(out.with_name(out.name + ".json"), meta)
    print(f"wrote {out} ({meta['sampled_points']} samples, acceleration {meta['achieved_accel']:.3f})")
    return EXIT_OK


def cmd_simulate(ctx: Ctx) -> int:
    a = ctx.args
    dims = _ints(a.dims, 3, "--dims")
    if a.coils < 1 or a.count < 1:
        raise UsageError("--coils and --count must be >= 1")
    if a.noise < 0:
        raise UsageError("--noise must be non-negative")
    mask = cvol.read_mask(ctx.path(a.mask))
    if mask.shape != dims[1:]:
        raise ShapeError(f"mask dims {mask.shape} do not match (pe, spe) = {dims[1:]}")
    out = ctx.path(a.out)
    entries = []
    for i in range(a.count):
        sample = simulate(SimSpec(dims, a.coils, mask, a.noise, a.seed + i, a.phantom))
        entries.append(write_sample(sample, out, f"sample{i:03d}"))
    write_manifest(out / "manifest.json", entries)
    print(f"wrote {a.count} sample(s) and {out / 'manifest.json'}")
    return EXIT_OK


def cmd_psf(ctx: Ctx) -> int:
    a = ctx.args
    mask = cvol.read_mask(ctx.path(a.mask))
    if not mask.any():
        raise ShapeError("mask has no sampled points")
    kernel = psf_of_mask(mask, a.n_ro)
    plane = np.abs(kernel[a.n_ro // 2])
    img, lo, hi = to_uint8(log_scale(plane))
    out = ctx.path(a.out)
    write_gray(out, img)
    _write_json(out.with_name(out.name + ".json"), {
        "view": "pe x spe at ro center", "scaling": "log10(1 + 1e3 |h| / max|h|)", "window": [lo, hi],
        "peak": float(plane.max()), "sampled_fraction": float(mask.mean())})
    print(f"wrote {out} ({img.shape[0]}x{img.shape[1]})")
    return EXIT_OK


def cmd_train(ctx: Ctx) -> int:
    a = ctx.args
    if a.variant not in VARIANTS:
        raise UnknownVariant(f"unknown variant {a.variant!r}; valid names: {', '.join(VARIANTS)}")
    if a.steps < 1 or a.lr < 0 or a.batch_size < 1:
        raise UsageError("--steps and --batch-size must be >= 1 and --lr non-negative")
    spec = TrainSpec(a.variant, str(ctx.path(a.data)), a.steps, a.batch_size, a.lr, seed=a.seed,
                     precision=a.precision, scale=a.scale)
    result = train(spec)
    out = ctx.path(a.out)
    save_checkpoint(out, result.config, result.params,
                    {"steps": a.steps, "lr": a.lr, "seed": a.seed, "precision": a.precision})
    write_loss_csv(out.with_name(out.name + ".loss.csv"), result.losses)
    print(f"wrote {out}; loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}")
    return EXIT_OK


def cmd_recon(ctx: Ctx) -> int:
    a = ctx.args
    config, params, _ = load_checkpoint(ctx.path(a.ckpt))
    y = cvol.read_volume(ctx.path(a.kspace))
    sens = cvol.read_volume(ctx.path(a.sens))
    mask = cvol.read_mask(ctx.path(a.mask))
    if y.shape != sens.shape:
        raise ShapeError(f"tensor 'kspace' has shape {y.shape}, 'sens' has {sens.shape}")
    if mask.shape != y.shape[2:]:
        raise ShapeError(f"tensor 'mask' has shape {mask.shape}, expected {y.shape[2:]}")
    dtype = next(iter(params.values())).dtype if params else np.float32
    ctype = np.complex64 if dtype == np.float32 else np.complex128
    x = UnrolledNet(config).reconstruct(params, y.astype(ctype), sens.astype(ctype), mask)
    out = ctx.path(a.out)
    cvol.write_volume(x.astype(np.complex64), out)
    if a.slices:
        sdir = ctx.path(a.slices)
        sdir.mkdir(parents=True, exist_ok=True)
        mag = np.abs(x)
        lo, hi = float(mag.min()), float(mag.max())
        for r in range(mag.shape[0]):
            write_gray(sdir / f"ro{r:03d}.pgm", to_uint8(mag[r], lo, hi)[0])
        _write_json(sdir / "window.json", {"window": [lo, hi], "view": "pe x spe per ro index"})
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(ctx: Ctx) -> int:
    a = ctx.args
    if a.ckpt or a.data:
        if not (a.ckpt and a.data):
            raise UsageError("--ckpt and --data must be given together")
        config, params, _ = load_checkpoint(ctx.path(a.ckpt))
        report = evaluate(config, params, load_manifest(ctx.path(a.data)))
        doc = report.to_dict()
        table = report.table()
    else:
        if not (a.pred and a.truth):
            raise UsageError("give --pred and --truth, or --ckpt and --data")
        pred = np.abs(cvol.read_volume(ctx.path(a.pred)))
        truth = np.abs(cvol.read_volume(ctx.path(a.truth)))
        if pred.shape != truth.shape:
            raise ShapeError(f"pred {pred.shape} and truth {truth.shape} differ")
        doc = {"ssim": ssim(truth, pred)}
        try:
            doc["psnr"] = psnr(truth, pred)
            doc["psnr_infinite"] = False
        except InfinitePSNR as exc:
            doc["psnr"] = None
            doc["psnr_infinite"] = True
            doc["psnr_error"] = str(exc)
        shown = "inf" if doc["psnr_infinite"] else f"{doc['psnr']:.3f}"
        table = f"{'SSIM':>8} {'PSNR':>9}\n{doc['ssim']:8.4f} {shown:>9}"
    if a.out:
        _write_json(ctx.path(a.out), doc)
    print(table)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=None, help="resolve relative paths against this directory")
    common.add_argument("--precision", choices=["f32", "f64"], default="f32")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dmlprecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", parents=[common], help="generate a sampling mask")
    p.add_argument("--dims", required=True, help="PE,SPE")
    p.add_argument("--type", choices=["uniform", "poisson"], required=True)
    p.add_argument("--accel", required=True, help="acceleration (uniform: R or R_PE,R_SPE)")
    p.add_argument("--center", default=None, help="fully sampled center A,B")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("simulate", parents=[common], help="simulate multi-coil acquisitions")
    p.add_argument("--dims", required=True, help="RO,PE,SPE")
    p.add_argument("--coils", type=int, required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--count", type=int, default=1, help="number of samples (seeds seed..seed+count-1)")
    p.add_argument("--phantom", choices=["ellipsoids", "blocks"], default="ellipsoids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("psf", parents=[common], help="render the image-domain kernel of a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--n-ro", type=int, default=1)
    p.add_argument("--out", required=True, help=".pgm or .png")
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("train", parents=[common], help="train a variant on a manifest")
    p.add_argument("--variant", required=True, help=", ".join(VARIANTS))
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--scale", choices=["desk", "full"], default="desk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recon", parents=[common], help="reconstruct with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kspace", required=True)
    p.add_argument("--sens", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slices", default=None, help="directory for PE-SPE magnitude slices")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", parents=[common], help="SSIM/PSNR of a prediction or a checkpoint")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return args.func(Ctx(args))
    except (UsageError, UnknownVariant) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, cvol.CvolError, CheckpointError, MaskGenerationError, UndefinedDataRange,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
