import csv

import numpy as np
import pytest

from dmlprecon.checkpoint import encode
from dmlprecon.metrics import InfinitePSNR, UndefinedDataRange, gaussian_window_1d, psnr, ssim
from dmlprecon.recon import CascadeConfig
from dmlprecon.sim import SimSpec, make_poisson_mask, simulate
from dmlprecon.train import (
    Adam,
    NonFiniteLoss,
    TrainSpec,
    evaluate,
    load_manifest,
    loss_mse,
    magnitude_metrics,
    train,
    write_loss_csv,
    write_manifest,
    write_sample,
)
from dmlprecon.volume import ShapeError


# -- loss and optimizer ------------------------------------------------------

def test_loss_values_and_gradient():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3, 4, 2)) + 1j * rng.normal(size=(3, 4, 2))
    assert loss_mse(t, t)[0] == 0
    assert loss_mse(t + 0.1, t)[0] == pytest.approx(0.01)
    p = t + rng.normal(size=t.shape) + 1j * rng.normal(size=t.shape)
    _, g = loss_mse(p, t)
    h = 1e-6
    for idx in [(0, 0, 0), (2, 3, 1)]:
        for unit in (1, 1j):
            q, r = p.copy(), p.copy()
            q[idx] += h * unit
            r[idx] -= h * unit
            fd = (loss_mse(q, t)[0] - loss_mse(r, t)[0]) / (2 * h)
            got = g[idx].real if unit == 1 else g[idx].imag
            assert got == pytest.approx(fd, rel=1e-6)
    with pytest.raises(ShapeError):
        loss_mse(t, t[:2])


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    Adam(lr=0.1).step(p, {"w": np.array([0.5, -4.0, 0.0])})
    # bias-corrected first step moves each nonzero-gradient entry by lr against its sign
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)


# -- metrics -----------------------------------------------------------------

def brute_ssim(a, b, sigma=1.5, extent=7):
    """Voxel-by-voxel windowed statistics with the truncated window renormalized."""
    w1 = gaussian_window_1d(sigma, extent)
    half = extent // 2
    L = a.max()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in np.ndindex(*a.shape):
        ws, xs, ys = [], [], []
        for off in np.ndindex(*(extent,) * a.ndim):
            j = tuple(i[d] + off[d] - half for d in range(a.ndim))
            if all(0 <= j[d] < a.shape[d] for d in range(a.ndim)):
                ws.append(np.prod([w1[o] for o in off]))
                xs.append(a[j])
                ys.append(b[j])
        w = np.array(ws) / np.sum(ws)
        x, y = np.array(xs), np.array(ys)
        mx, my = w @ x, w @ y
        vx, vy, cxy = w @ (x - mx) ** 2, w @ (y - my) ** 2, w @ ((x - mx) * (y - my))
        vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identity_and_constant():
    x = np.random.default_rng(1).random((6, 5, 4))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    c1 = 1e-4
    expected = (2 * 0.5 + c1) / (1 + 0.25 + c1)
    assert ssim(np.ones((6, 6, 6)), np.full((6, 6, 6), 0.5)) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.8001, abs=1e-4)


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(2)
    a = rng.random((5, 6, 4))
    b = a + 0.2 * rng.normal(size=a.shape)
    assert ssim(a, b) == pytest.approx(brute_ssim(a, b), rel=1e-9)


def test_ssim_errors():
    with pytest.raises(UndefinedDataRange, match="undefined data range"):
        ssim(np.zeros((4, 4, 4)), np.ones((4, 4, 4)))
    with pytest.raises(ShapeError):
        ssim(np.ones((4, 4, 4)), np.ones((4, 4, 3)))


def test_psnr_definition():
    ref = np.zeros((4, 5, 5))
    ref[0, 0, 0] = 1.0
    assert psnr(ref, ref + 0.1) == pytest.approx(20.0)
    assert psnr(ref, ref - 0.01) == pytest.approx(40.0)
    with pytest.raises(InfinitePSNR, match="infinite PSNR"):
        psnr(ref, ref)


def test_metrics_monotone_in_noise():
    rng = np.random.default_rng(3)
    truth = np.abs(rng.normal(size=(8, 8, 8)))
    noise = rng.normal(size=truth.shape)
    levels = [0.01, 0.05, 0.1, 0.3]
    ssims = [ssim(truth, truth + s * noise) for s in levels]
    psnrs = [psnr(truth, truth + s * noise) for s in levels]
    assert ssims == sorted(ssims, reverse=True)
    assert psnrs == sorted(psnrs, reverse=True)


# -- training ----------------------------------------------------------------

def tiny_config():
    return CascadeConfig(layers=[{"type": "conv_block", "depth": 2, "channels": 4, "kernel": [3, 3, 3]}],
                         n_cascades=2)


@pytest.fixture(scope="module")
def samples():
    out = []
    for seed in range(3):
        mask = make_poisson_mask((16, 8), 3, (4, 4), seed=seed)
        out.append(simulate(SimSpec((8, 16, 8), 2, mask, seed=seed)))
    return out


def test_zero_learning_rate_keeps_params(samples):
    cfg = tiny_config()
    before = train(TrainSpec("MC-CNN", steps=1, lr=0.0, seed=4), samples[:1], cfg)
    after = train(TrainSpec("MC-CNN", steps=5, lr=0.0, seed=4), samples, cfg)
    for k in before.params:
        np.testing.assert_array_equal(after.params[k], before.params[k])


def test_reruns_bit_identical(samples):
    cfg = tiny_config()
    a = train(TrainSpec("MC-CNN", steps=6, batch_size=2, seed=1), samples, cfg)
    b = train(TrainSpec("MC-CNN", steps=6, batch_size=2, seed=1), samples, cfg)
    assert encode(a.config, a.params) == encode(b.config, b.params)
    assert a.losses == b.losses
    c = train(TrainSpec("MC-CNN", steps=6, batch_size=2, seed=2), samples, cfg)
    assert encode(c.config, c.params) != encode(a.config, a.params)


def test_loss_decreases(samples):
    res = train(TrainSpec("MC-CNN", steps=50, lr=3e-3, seed=0), samples, tiny_config())
    assert np.mean(res.losses[-10:]) < 0.7 * np.mean(res.losses[:10])


def test_non_finite_loss_reports_step(samples):
    bad = simulate(SimSpec((8, 16, 8), 2, samples[0].mask, seed=0))
    bad.ground_truth = bad.ground_truth.copy()
    bad.ground_truth[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        train(TrainSpec("MC-CNN", steps=3, seed=0), [bad], tiny_config())
    assert info.value.step == 0
    assert "step 0" in str(info.value)


def test_spec_validation():
    with pytest.raises(ValueError):
        TrainSpec("MC-CNN", steps=0)
    with pytest.raises(ValueError):
        TrainSpec("MC-CNN", lr=-1)
    with pytest.raises(ValueError):
        TrainSpec("MC-CNN", precision="f16")


def test_manifest_roundtrip_and_evaluate(tmp_path, samples):
    entries = [write_sample(s, tmp_path, f"s{i}") for i, s in enumerate(samples)]
    write_manifest(tmp_path / "manifest.json", entries)
    loaded = load_manifest(tmp_path / "manifest.json")
    assert len(loaded) == 3
    np.testing.assert_array_equal(loaded[1].mask, samples[1].mask)
    np.testing.assert_array_equal(loaded[1].kspace, samples[1].kspace.astype(np.complex64))
    res = train(TrainSpec("MC-CNN", manifest=str(tmp_path / "manifest.json"), steps=2), config=tiny_config())
    report = evaluate(res.config, res.params, loaded)
    doc = report.to_dict()
    assert len(doc["per_volume"]["psnr"]) == 3
    assert "zero_filled" in doc and "mean" in report.table()
    write_loss_csv(tmp_path / "loss.csv", res.losses)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["step", "loss"] and len(rows) == 3


def test_evaluate_ground_truth_against_itself(samples):
    s, p = magnitude_metrics(samples[0].ground_truth, samples[0].ground_truth)
    assert s == pytest.approx(1.0) and p == float("inf")


def test_desk_preset_halves_loss_in_50_steps():
    mask = make_poisson_mask((24, 12), 4, (6, 6), seed=0)
    sample = simulate(SimSpec((16, 24, 12), 2, mask, seed=0))
    res = train(TrainSpec("MC-CNN", steps=50, seed=0), [sample])
    assert res.losses[-1] < 0.5 * res.losses[0]
