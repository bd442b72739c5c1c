"""Synthetic acquisitions: phantoms, coil maps, undersampling masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fourier import sense_forward

ELLIPSOIDS = "ellipsoids"
BLOCKS = "blocks"


class MaskGenerationError(RuntimeError):
    pass


def _center_slices(dims: tuple[int, int], center: tuple[int, int]) -> tuple[slice, slice]:
    out = []
    for n, c in zip(dims, center):
        if c < 0 or c > n:
            raise ValueError(f"center {tuple(center)} does not fit in grid {tuple(dims)}")
        start = n // 2 - c // 2
        out.append(slice(start, start + c))
    return tuple(out)


def make_uniform_mask(dims: tuple[int, int], rate: int | tuple[int, int], center: tuple[int, int] = (0, 0),
                      seed: int = 0) -> np.ndarray:
    """Separable comb sampling every ``rate``-th line along PE and SPE.

    The comb phase keeps the DC line (index ``n // 2``) sampled and the
    central rectangle is forced on. ``rate`` may be given per axis. ``seed``
    is accepted for interface symmetry; the comb is deterministic.
    """
    rates = (rate, rate) if np.isscalar(rate) else tuple(rate)
    if min(rates) < 1:
        raise ValueError("rate must be >= 1")
    cs = _center_slices(dims, center)
    lines = [(np.arange(n) - n // 2) % r == 0 for n, r in zip(dims, rates)]
    mask = np.logical_and.outer(lines[0], lines[1])
    mask[cs] = True
    return mask


def _rsa(order: np.ndarray, shape: tuple[int, int], r2: int, target: int) -> np.ndarray:
    """Random sequential addition on a grid, stopping once ``target`` points are placed.

    A dart is rejected when a kept point lies at squared distance < ``r2``.
    """
    n_pe, n_spe = shape
    r = math.isqrt(r2)
    di, dj = np.mgrid[-r:r + 1, -r:r + 1]
    disc = di * di + dj * dj < r2
    blocked = np.zeros((n_pe + 2 * r, n_spe + 2 * r), dtype=bool)
    chosen = np.zeros(shape, dtype=bool)
    placed = 0
    for flat in order:
        i, j = divmod(int(flat), n_spe)
        if blocked[i + r, j + r]:
            continue
        chosen[i, j] = True
        blocked[i:i + 2 * r + 1, j:j + 2 * r + 1] |= disc
        placed += 1
        if placed == target:
            break
    return chosen


def poisson_disk(dims: tuple[int, int], accel: float, center: tuple[int, int] = (10, 10),
                 seed: int = 0, tolerance: float = 0.05) -> tuple[np.ndarray, float]:
    """Poisson-disk mask over the PE x SPE grid and the calibrated radius.

    Darts are thrown in a seeded random order; a point is kept when no kept
    point outside the center lies closer than the radius. Throwing stops at
    the target count, and the radius is the largest one (bisected over the
    grid's distinct distances) whose throw still reaches that count.
    """
    if accel <= 1:
        raise ValueError("acceleration must be > 1")
    dims = (int(dims[0]), int(dims[1]))
    total = dims[0] * dims[1]
    if accel > total:
        raise ValueError(f"acceleration {accel} exceeds grid size {total}")
    cs = _center_slices(dims, center)
    in_center = np.zeros(dims, dtype=bool)
    in_center[cs] = True
    n_center = int(in_center.sum())
    target_total = int(round(total / accel))
    target = target_total - n_center

    rng = np.random.default_rng(seed)
    order = rng.permutation(np.flatnonzero(~in_center))

    def achieved(extra: np.ndarray) -> float:
        return (n_center + int(extra.sum())) / total

    if target <= 0:
        frac = n_center / total
        if abs(frac * accel - 1) > tolerance:
            raise MaskGenerationError(f"center alone gives fraction {frac:.4f}, target {1 / accel:.4f}")
        return in_center.copy(), float(max(dims))

    # distinct grid distances; the dart outcome only changes when the radius crosses one
    d2 = np.unique(np.add.outer(np.arange(dims[0]) ** 2, np.arange(dims[1]) ** 2))
    radii2 = [int(v) for v in d2[d2 > 0]]
    lo, hi = 0, len(radii2) - 1
    best = _rsa(order, dims, radii2[0], target)
    best_r2 = radii2[0]
    if int(best.sum()) < target:
        raise MaskGenerationError(f"target fraction {1 / accel:.4f} unreachable; achieved {achieved(best):.4f}")
    while lo < hi:
        mid = (lo + hi + 1) // 2
        trial = _rsa(order, dims, radii2[mid], target)
        if int(trial.sum()) >= target:
            lo, best, best_r2 = mid, trial, radii2[mid]
        else:
            hi = mid - 1

    mask = best | in_center
    frac = achieved(best)
    if abs(frac * accel - 1) > tolerance:
        raise MaskGenerationError(f"achieved fraction {frac:.4f} outside tolerance of {1 / accel:.4f}")
    return mask, math.sqrt(best_r2)


def make_poisson_mask(dims: tuple[int, int], accel: float, center: tuple[int, int] = (10, 10),
                      seed: int = 0) -> np.ndarray:
    return poisson_disk(dims, accel, center, seed)[0]


def make_phantom(dims: tuple[int, int, int], kind: str = ELLIPSOIDS, seed: int = 0) -> np.ndarray:
    """Piecewise-constant magnitude in [0, 1] with a smooth low-order phase."""
    if any(d < m for d, m in zip(dims, (8, 8, 4))):
        raise ValueError(f"phantom dims must be at least (8, 8, 4), got {tuple(dims)}")
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in dims], indexing="ij")
    mag = np.zeros(dims)

    # a large background body, then randomized inner structures
    if kind == ELLIPSOIDS:
        body = sum((g / r) ** 2 for g, r in zip(grids, (0.9, 0.85, 0.85))) <= 1
        mag[body] = 0.4
        for _ in range(8):
            c = rng.uniform(-0.5, 0.5, 3)
            r = rng.uniform(0.12, 0.45, 3)
            inside = sum(((g - ci) / ri) ** 2 for g, ci, ri in zip(grids, c, r)) <= 1
            mag[inside & body] += rng.uniform(-0.25, 0.45)
    elif kind == BLOCKS:
        body = np.ones(dims, dtype=bool)
        for g in grids:
            body &= np.abs(g) <= 0.85
        mag[body] = 0.4
        for _ in range(8):
            c = rng.uniform(-0.5, 0.5, 3)
            h = rng.uniform(0.1, 0.4, 3)
            inside = np.ones(dims, dtype=bool)
            for g, ci, hi in zip(grids, c, h):
                inside &= np.abs(g - ci) <= hi
            mag[inside & body] += rng.uniform(-0.25, 0.45)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    mag = np.clip(mag, 0.0, 1.0)

    coef = rng.uniform(-0.6, 0.6, 6)
    x, y, z = grids
    phase = coef[0] * x + coef[1] * y + coef[2] * z + coef[3] * x * y + coef[4] * y * z + coef[5] * x * z
    return mag * np.exp(1j * phase)


def make_sensitivities(dims: tuple[int, int, int], n_coils: int, seed: int = 0,
                       width: float = 0.8) -> np.ndarray:
    """Gaussian-lobe coil maps around the PE-SPE boundary, normalized voxelwise.

    Returns ``(n_coils, ro, pe, spe)`` with ``sum_c |s_c|^2 == 1`` everywhere.
    """
    if n_coils < 1:
        raise ValueError("need at least one coil")
    rng = np.random.default_rng(seed)
    x, y, z = np.meshgrid(*[np.linspace(-1, 1, n) for n in dims], indexing="ij")
    angles = 2 * np.pi * (np.arange(n_coils) / n_coils) + rng.uniform(0, 2 * np.pi)
    maps = np.empty((n_coils, *dims), dtype=complex)
    for c, ang in enumerate(angles):
        cy, cz = 1.2 * np.cos(ang), 1.2 * np.sin(ang)
        cx = rng.uniform(-0.5, 0.5)
        d2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
        tilt = rng.uniform(-0.5, 0.5, 3)
        phase = rng.uniform(0, 2 * np.pi) + tilt[0] * x + tilt[1] * y + tilt[2] * z
        maps[c] = np.exp(-d2 / (2 * width**2)) * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / rss


@dataclass
class SimSpec:
    dims: tuple[int, int, int]
    n_coils: int
    mask: np.ndarray
    noise: float = 0.0
    seed: int = 0
    phantom: str = ELLIPSOIDS


@dataclass
class SimSample:
    ground_truth: np.ndarray
    sens: np.ndarray
    mask: np.ndarray
    kspace: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)


def simulate(spec: SimSpec) -> SimSample:
    """Phantom + coil maps + masked multi-coil k-space, with optional noise on sampled points."""
    # independent streams per component so changing one never perturbs the others
    ss = np.random.SeedSequence(spec.seed)
    s_phantom, s_sens, s_noise = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    truth = make_phantom(spec.dims, spec.phantom, s_phantom)
    sens = make_sensitivities(spec.dims, spec.n_coils, s_sens)
    k = sense_forward(truth, sens, spec.mask)
    if spec.noise > 0:
        rng = np.random.default_rng(s_noise)
        noise = rng.normal(size=k.shape) + 1j * rng.normal(size=k.shape)
        k = k + np.where(spec.mask, noise * (spec.noise / np.sqrt(2)), 0)
    return SimSample(truth, sens, spec.mask.copy(), k, spec.seed)
