import numpy as np
import pytest

from dmlprecon.checkpoint import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from dmlprecon.fourier import fft_centered, sense_adjoint, sense_forward
from dmlprecon.recon import (
    MULTI_COIL,
    SINGLE_COIL,
    VARIANTS,
    CascadeConfig,
    UnknownVariant,
    UnrolledNet,
    df_linear,
    df_step,
    expand_variant,
    zero_filled,
)
from dmlprecon.sim import SimSpec, make_poisson_mask, make_sensitivities, simulate
from dmlprecon.train import TrainSpec, train
from dmlprecon.volume import ShapeError
from oracles import crandn, fd_param_check, rel


def instance(dims=(8, 8, 4), coils=4, seed=0, density=0.4):
    rng = np.random.default_rng(seed)
    sens = make_sensitivities(dims, coils, seed=seed)
    mask = rng.random(dims[1:]) < density
    x = crandn(rng, dims)
    return rng, sens, mask, x


# -- data fidelity -----------------------------------------------------------

def test_df_full_mask_ignores_z():
    rng, sens, _, x = instance()
    full = np.ones(x.shape[1:], dtype=bool)
    y = crandn(rng, sens.shape)
    out = df_step(crandn(rng, x.shape), y, sens, full)
    assert rel(out, sense_adjoint(y, sens, full)) < 1e-6


def test_df_empty_mask_returns_z():
    rng, sens, _, z = instance()
    empty = np.zeros(z.shape[1:], dtype=bool)
    assert rel(df_step(z, np.zeros(sens.shape, complex), sens, empty), z) < 1e-6


def test_df_consistency_fixed_point():
    _, sens, mask, x = instance()
    y = sense_forward(x, sens, mask)
    assert rel(df_step(x, y, sens, mask), x) < 1e-6


def test_df_matches_operator_composition():
    rng, sens, mask, z = instance(coils=3)
    y = sense_forward(crandn(rng, z.shape), sens, mask)
    k = fft_centered(sens * z)
    expected = np.zeros_like(z)
    for c in range(sens.shape[0]):
        merged = np.where(mask, y[c], k[c])
        expected += np.conj(sens[c]) * np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(merged), norm="ortho"))
    assert rel(df_step(z, y, sens, mask), expected) < 1e-12


def test_df_single_coil_idempotent_and_hard_consistent():
    rng = np.random.default_rng(1)
    dims = (6, 8, 4)
    ones = np.ones((1, *dims), complex)
    mask = rng.random(dims[1:]) < 0.5
    y = sense_forward(crandn(rng, dims), ones, mask)
    z = crandn(rng, dims)
    once = df_step(z, y, ones, mask)
    assert rel(df_step(once, y, ones, mask), once) < 1e-6
    assert rel(sense_forward(once, ones, mask), y) < 1e-6


def test_df_multi_coil_sampled_kspace_projection():
    rng, sens, mask, z = instance(coils=3, seed=2)
    y = sense_forward(crandn(rng, z.shape), sens, mask)
    out = df_step(z, y, sens, mask)
    k = np.where(mask, 0, fft_centered(sens * z)) + y
    inner = sense_adjoint(k, sens, np.ones_like(mask))
    assert rel(sense_forward(out, sens, mask), sense_forward(inner, sens, mask)) < 1e-6


def test_df_linear_self_adjoint():
    rng, sens, mask, a = instance(seed=3)
    b = crandn(rng, a.shape)
    lhs = np.vdot(df_linear(a, sens, mask), b)
    rhs = np.vdot(a, df_linear(b, sens, mask))
    assert abs(lhs - rhs) < 1e-10 * abs(lhs)


def test_df_finite_differences():
    rng, sens, mask, z = instance(dims=(4, 6, 2), coils=2, seed=4)
    y = crandn(rng, sens.shape)
    r = crandn(rng, z.shape)

    def loss(v):
        out = df_step(v, y, sens, mask)
        return np.sum(r.real * out.real + r.imag * out.imag)

    analytic = df_linear(r, sens, mask)
    h = 1e-3
    worst = 0.0
    for idx in np.ndindex(*z.shape):
        for unit in (1, 1j):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h * unit
            zm[idx] -= h * unit
            fd = (loss(zp) - loss(zm)) / (2 * h)
            got = analytic[idx].real if unit == 1 else analytic[idx].imag
            worst = max(worst, abs(got - fd) / max(abs(got), abs(fd), 1e-8))
    assert worst < 1e-4


def test_df_dim_mismatch():
    _, sens, mask, z = instance()
    with pytest.raises(ShapeError):
        df_step(z[:, :, :2], np.zeros(sens.shape, complex), sens, mask)
    with pytest.raises(ShapeError):
        df_step(z, np.zeros(sens.shape, complex), sens, mask.T)


# -- cascades ----------------------------------------------------------------

def small_config(n_cascades=2, df=MULTI_COIL, with_dmlp=True):
    layers = [{"type": "conv_block", "depth": 2, "channels": 3, "kernel": [3, 3, 3]}]
    if with_dmlp:
        layers.append({"type": "dmlp", "axis": "pe", "p_spatial": 4, "channels": [2, 3, 2], "shifts": [2, 2],
                       "residual": True, "activation": "leaky_relu"})
    return CascadeConfig(layers=layers, n_cascades=n_cascades, df=df)


def zero_params(net):
    return {k: np.zeros_like(v) for k, v in net.init(np.random.default_rng(0), np.float64).items()}


def test_zero_cascades_is_zero_filled():
    _, sens, mask, x = instance()
    y = sense_forward(x, sens, mask)
    net = UnrolledNet(small_config(n_cascades=0))
    out, _ = net.forward(net.init(np.random.default_rng(0), np.float64), y, sens, mask)
    np.testing.assert_array_equal(out, zero_filled(y, sens, mask))


def test_identity_cascades_iterate_df():
    rng, sens, mask, x = instance(seed=5)
    y = sense_forward(x, sens, mask)
    net = UnrolledNet(small_config(n_cascades=3, with_dmlp=False))
    out, _ = net.forward(zero_params(net), y, sens, mask)
    expected = sense_adjoint(y, sens, mask)
    for _ in range(3):
        expected = df_step(expected, y, sens, mask)
    assert rel(out, expected) < 1e-12


def test_identity_cascades_single_coil_stable_after_first():
    rng = np.random.default_rng(6)
    dims = (4, 8, 4)
    ones = np.ones((1, *dims), complex)
    mask = rng.random(dims[1:]) < 0.5
    y = sense_forward(crandn(rng, dims), ones, mask)
    one = UnrolledNet(small_config(1, SINGLE_COIL, with_dmlp=False))
    three = UnrolledNet(small_config(3, SINGLE_COIL, with_dmlp=False))
    a = one.reconstruct(zero_params(one), y, ones, mask)
    b = three.reconstruct(zero_params(three), y, ones, mask)
    assert rel(b, a) < 1e-12


@pytest.mark.parametrize("df", [MULTI_COIL, SINGLE_COIL])
def test_full_sampling_returns_ground_truth(df):
    _, sens, _, x = instance(seed=7)
    full = np.ones(x.shape[1:], dtype=bool)
    y = sense_forward(x, sens, full)
    net = UnrolledNet(small_config(n_cascades=2, df=df))
    params = {k: v + 0.3 for k, v in net.init(np.random.default_rng(1), np.float64).items()}
    assert rel(net.reconstruct(params, y, sens, full), x) < 1e-5


def test_backward_through_identity_cascade_is_df_operator():
    rng, sens, mask, _ = instance(dims=(8, 8, 1), coils=2, seed=8)
    y = crandn(rng, sens.shape)
    net = UnrolledNet(small_config(n_cascades=1, with_dmlp=False))
    params = zero_params(net)
    _, record = net.forward(params, y, sens, mask)
    g = crandn(rng, sens.shape[1:])
    _, g0 = net.backward(params, record, g, return_input_grad=True)
    # dense matrix of the cascade's map x0 -> x1 assembled column by column
    n = g.size
    cols = [df_step(np.eye(n)[i].reshape(g.shape).astype(complex), np.zeros_like(y), sens, mask).ravel()
            for i in range(n)]
    dense = np.array(cols).T
    assert rel(g0.ravel(), dense.conj().T @ g.ravel()) < 1e-12
    assert rel(g0, df_linear(g, sens, mask)) < 1e-12


@pytest.mark.parametrize("df", [MULTI_COIL, SINGLE_COIL])
def test_two_cascade_finite_differences(df):
    rng, sens, mask, x = instance(dims=(8, 8, 4), coils=2, seed=9)
    y = sense_forward(x, sens, mask)
    net = UnrolledNet(small_config(n_cascades=2, df=df))
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in net.init(rng, np.float64).items()}
    assert fd_param_check(net, params, y, sens, mask) < 1e-4


def test_unused_parameters_get_zero_gradient():
    rng, sens, mask, x = instance(seed=10)
    y = sense_forward(x, sens, mask)
    net = UnrolledNet(small_config(n_cascades=1))
    params = net.init(rng, np.float64)
    params["cascade9.extra"] = np.ones(3)
    _, record = net.forward(params, y, sens, mask)
    grads = net.backward(params, record, crandn(rng, x.shape))
    np.testing.assert_array_equal(grads["cascade9.extra"], 0)
    assert set(grads) == set(params)


def test_shared_weights_single_parameter_set():
    cfg = small_config(n_cascades=3)
    cfg.share_weights = True
    rng, sens, mask, x = instance(dims=(8, 8, 4), coils=2, seed=11)
    net = UnrolledNet(cfg)
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in net.init(rng, np.float64).items()}
    assert all(k.startswith("cascade0.") for k in params)
    assert fd_param_check(net, params, sense_forward(x, sens, mask), sens, mask) < 1e-4


# -- presets -----------------------------------------------------------------

def test_variant_expansions():
    for name in VARIANTS:
        assert expand_variant(name).n_cascades == 5
    layers = expand_variant("MC-CNN-dMLP").layers
    assert [(d["type"], d.get("axis")) for d in layers] == [("conv_block", None), ("dmlp", "pe"), ("dmlp", "spe")]
    assert [d["axis"] for d in expand_variant("MC-dMLP").layers] == ["ro", "pe", "spe"]
    assert all(d["kernel_len"] == 64 for d in expand_variant("MC-1DCNN-L").layers)
    assert all(d["kernel_len"] == 3 for d in expand_variant("MC-1DCNN").layers)
    assert [d["axis"] for d in expand_variant("MC-CNN-1DCNN-L").layers[1:]] == ["pe", "spe"]
    assert expand_variant("SC-CNN").df == SINGLE_COIL
    assert expand_variant("MC-CNN").df == MULTI_COIL
    assert expand_variant("MC-CNN-dMLP", "full").layers[1]["p_spatial"] == 64
    with pytest.raises(UnknownVariant, match="MC-CNN-dMLP"):
        expand_variant("MC-Transformer")


def test_config_dict_roundtrip():
    cfg = expand_variant("MC-CNN-dMLP")
    assert CascadeConfig.from_dict(cfg.to_dict()) == cfg


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_bytes_and_outputs(tmp_path):
    cfg = small_config()
    net = UnrolledNet(cfg)
    params = net.init(np.random.default_rng(0), np.float32)
    save_checkpoint(tmp_path / "a.ckpt", cfg, params, {"steps": 3})
    cfg2, params2, extra = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", cfg2, params2, extra)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert extra == {"steps": 3}
    _, sens, mask, x = instance()
    y = sense_forward(x, sens, mask).astype(np.complex64)
    np.testing.assert_array_equal(net.reconstruct(params, y, sens, mask),
                                  UnrolledNet(cfg2).reconstruct(params2, y, sens, mask))


def test_checkpoint_errors(tmp_path):
    cfg = small_config()
    params = UnrolledNet(cfg).init(np.random.default_rng(0), np.float64)
    blob = encode(cfg, params)
    bad_version = blob[:4] + (7).to_bytes(4, "little") + blob[8:]
    with pytest.raises(CheckpointVersionError):
        decode(bad_version)
    with pytest.raises(CheckpointError):
        decode(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError):
        decode(blob[:-3])
    save_checkpoint(tmp_path / "c.ckpt", cfg, params)
    other = small_config()
    other.layers[0]["channels"] = 5
    with pytest.raises(CheckpointShapeError, match="cascade0.0.0.kernel"):
        load_checkpoint(tmp_path / "c.ckpt", other)
    assert not issubclass(CheckpointShapeError, CheckpointVersionError)


# -- dynamic matrix size -----------------------------------------------------

def test_one_model_reconstructs_several_matrix_sizes():
    def sample(dims, seed):
        mask = make_poisson_mask(dims[1:], 3, (4, 4), seed=seed)
        return simulate(SimSpec(dims, 2, mask, seed=seed))

    res = train(TrainSpec("MC-CNN-dMLP", steps=2, seed=0), [sample((8, 16, 8), 0)])
    net = UnrolledNet(res.config)
    for dims in [(16, 24, 12), (16, 28, 20)]:
        s = sample(dims, 1)
        out = net.reconstruct(res.params, s.kspace.astype(np.complex64), s.sens.astype(np.complex64), s.mask)
        assert out.shape == dims and np.all(np.isfinite(out))
