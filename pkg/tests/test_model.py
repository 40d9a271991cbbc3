import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcrnet.autodiff import Tape, Tensor, mse_loss
from dcrnet.errors import ConfigError, DataError, DimensionError
from dcrnet.model import (
    Ablation,
    Conv2d,
    DcrNetConfig,
    build,
    checkpoint_bytes,
    decode,
    encode,
    enumerate_layers,
    load_checkpoint,
    load_config,
    read_checkpoint,
    receptive_field,
    save_checkpoint,
    with_ablation,
)
from oracles import central_diff, kink_tolerant_error


def _convs(model):
    return [r for r in enumerate_layers(model) if r.kind == "conv"]


def test_default_build_shapes():
    m = build(DcrNetConfig(), 0)
    assert m.encoder.fc.weight.shape == (512, 2048)
    assert m.decoder.fc.weight.shape == (2048, 512)
    fcs = [r for r in enumerate_layers(m) if r.kind == "fc"]
    assert [(r.in_features, r.out_features) for r in fcs] == [(2048, 512), (512, 2048)]
    assert m.encoder.fc.weight.size + m.encoder.fc.bias.size == 1_049_088


def test_codeword_length():
    assert DcrNetConfig(eta=Fraction(1, 32)).codeword_len == 64
    assert DcrNetConfig(eta="1/16").codeword_len == 128


def test_seeded_build_is_deterministic():
    a = build(DcrNetConfig(), 7).parameter_vector()
    b = build(DcrNetConfig(), 7).parameter_vector()
    c = build(DcrNetConfig(), 8).parameter_vector()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_ablation_dilations():
    base = build(DcrNetConfig(ablation="baseline"), 0)
    assert all(r.spec.dilation == (1, 1) for r in _convs(base))
    m1 = build(DcrNetConfig(ablation="m1"), 0)
    enc = [r for r in _convs(m1) if r.name.startswith("encoder")]
    dec = [r for r in _convs(m1) if r.name.startswith("decoder")]
    assert any(r.spec.dilation != (1, 1) for r in enc)
    assert all(r.spec.dilation == (1, 1) for r in dec)
    full = build(DcrNetConfig(), 0)
    assert any(r.spec.dilation != (1, 1) for r in _convs(full) if r.name.startswith("decoder"))


def test_ablations_differ_only_in_dilation():
    rows = {a: enumerate_layers(build(DcrNetConfig(ablation=a), 0)) for a in Ablation}
    full = rows[Ablation.FULL]
    for other in rows.values():
        assert [r.name for r in other] == [r.name for r in full]
        for a, b in zip(full, other):
            if a.kind == "conv":
                assert a.spec.kernel == b.spec.kernel and a.spec.groups == b.spec.groups
                assert a.spec.in_channels == b.spec.in_channels
                assert a.spec.num_params == b.spec.num_params


def test_width_scales_with_rho():
    def widths(rho):
        m = build(DcrNetConfig(rho=rho), 0)
        return {r.spec.out_channels for r in _convs(m) if ".blocks." in r.name}
    assert max(widths(1)) == 8
    assert max(widths(4)) == 32


def test_config_validation():
    for bad in (dict(rho=0), dict(eta="3/2"), dict(eta=0), dict(na=0), dict(ablation="m2"),
                dict(decoder_groups=3)):
        with pytest.raises(ConfigError):
            DcrNetConfig(**bad)
    with pytest.raises(ConfigError):
        DcrNetConfig(rho=1.5)


def test_config_text_round_trip(tmp_path):
    c = DcrNetConfig(eta="1/16", rho=4, ablation="m1", decoder_groups=4)
    assert DcrNetConfig.from_text(c.to_text()) == c
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nna = 32\neta=1/8\nrho=10\n")
    assert load_config(p) == DcrNetConfig(eta=Fraction(1, 8), rho=10)
    with pytest.raises(ConfigError):
        DcrNetConfig.from_text("depth=3\n")
    with pytest.raises(ConfigError):
        DcrNetConfig.from_text("rho=two\n")


@settings(max_examples=15, deadline=None)
@given(na=st.integers(4, 9), nt=st.integers(4, 9), den=st.sampled_from([2, 4, 8, 16]),
       rho=st.integers(1, 2), ablation=st.sampled_from(["full", "m1", "baseline"]),
       n=st.integers(2, 3))
def test_forward_shapes(na, nt, den, rho, ablation, n):
    c = DcrNetConfig(na=na, nt=nt, eta=Fraction(1, den), rho=rho, ablation=ablation)
    m = build(c, 0)
    x = np.random.default_rng(0).uniform(0, 1, (n, 2, na, nt)).astype(np.float32)
    v = encode(m, x)
    assert v.shape == (n, (2 * na * nt) // den) == (n, c.codeword_len)
    assert decode(m, v).shape == x.shape
    assert m(Tensor(x)).shape == x.shape


def test_shape_errors():
    m = build(DcrNetConfig(na=8, nt=8), 0)
    with pytest.raises(DimensionError):
        m.encode(np.zeros((2, 2, 8, 9), np.float32))
    with pytest.raises(DimensionError):
        m.decode(np.zeros((2, 31), np.float32))


def test_zero_inputs_give_finite_deterministic_outputs():
    m = build(DcrNetConfig(), 3).eval()
    v1 = encode(m, np.zeros((2, 2, 32, 32), np.float32)).data
    v2 = encode(m, np.zeros((2, 2, 32, 32), np.float32)).data
    assert np.all(np.isfinite(v1)) and np.array_equal(v1, v2)
    d1 = decode(m, np.zeros((2, 512), np.float32)).data
    d2 = decode(m, np.zeros((2, 512), np.float32)).data
    assert np.all(np.isfinite(d1)) and np.array_equal(d1, d2)


def test_every_pixel_reaches_the_codeword():
    m = build(DcrNetConfig(), 1, np.float64).eval()
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (1, 2, 32, 32))
    base = encode(m, Tensor(x, dtype=np.float64)).data
    for _ in range(100):
        c, i, j = rng.integers(0, 2), rng.integers(0, 32), rng.integers(0, 32)
        y = x.copy()
        y[0, c, i, j] += 0.1
        assert np.any(encode(m, Tensor(y, dtype=np.float64)).data != base)


def _neutral_positive(model):
    """Eval mode, BN as identity (up to eps), all conv weights positive."""
    model.eval()
    for _, mod in model.named_modules():
        if isinstance(mod, Conv2d):
            mod.weight.data[...] = np.abs(mod.weight.data) + 0.1
    return model


def _support(module, size=41, channels=2):
    x = np.zeros((1, channels, size, size))
    x[0, :, size // 2, size // 2] = 1.0
    y = module(Tensor(x, dtype=np.float64)).data
    rows, cols = np.nonzero(np.any(y[0] > 0, axis=0))
    box = (rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
    dense = (rows.size == box[0] * box[1])
    return box, dense


def test_impulse_support_matches_receptive_fields():
    m = _neutral_positive(build(DcrNetConfig(), 0, np.float64))
    enc = m.encoder
    assert _support(enc.block.dilated) == ((13, 13), True)
    assert receptive_field(m, "encoder_dilated") == (13, 13)

    def enc_stack(x):
        return enc.block(enc.head(x))
    assert _support(enc_stack) == ((17, 17), True)
    assert receptive_field(m, "encoder") == (17, 17)
    block = m.decoder.blocks._modules["0"]
    assert _support(block) == ((13, 13), True)
    assert receptive_field(m, "decoder_block") == (13, 13)


def test_baseline_receptive_field_is_smaller():
    m = _neutral_positive(build(DcrNetConfig(ablation="baseline"), 0, np.float64))
    assert _support(m.encoder.block.dilated)[0] == (7, 7)
    assert receptive_field(m, "encoder_dilated") == (7, 7)


def test_residual_blocks_reduce_to_identity():
    m = build(DcrNetConfig(na=8, nt=8), 0, np.float64).eval()
    x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 8, 8)), dtype=np.float64)
    blocks = [m.encoder.block] + list(m.decoder.blocks)
    for block in blocks:
        for _, mod in block.named_modules():
            if isinstance(mod, Conv2d):
                mod.weight.data[...] = 0.0
        assert np.array_equal(block(x).data, x.data)


def test_model_gradients_match_finite_differences():
    # lighter version of the acceptance check: three seeds, sampled entries
    for seed in range(3):
        m = build(DcrNetConfig(na=8, nt=8), seed, np.float64)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(0, 1, (4, 2, 8, 8)), dtype=np.float64)
        m.zero_grad()
        with Tape() as tape:
            loss = mse_loss(m(x), x)
        tape.backward(loss)
        params = m.parameters()
        fd = central_diff(lambda: float(mse_loss(m(x), x).item()), [p.data for p in params],
                          eps=(1e-6, 1e-7), entries=2, rng=rng)
        for k, p in enumerate(params):
            pos, vals = fd[k]
            # absolute floor above finite-difference roundoff; some BN slopes
            # have an exactly vanishing gradient at init
            floor = max(1e-4 * float(np.abs(p.grad).max()), 1e-6)
            err = kink_tolerant_error(p.grad.reshape(-1)[pos], vals, floor)
            assert err.max() < 1e-3, p.name


def test_astype_copies_state():
    m = build(DcrNetConfig(na=8, nt=8), 0)
    m64 = m.astype(np.float64)
    assert m64.dtype == np.float64
    for (n1, a), (n2, b) in zip(m.state_dict().items(), m64.state_dict().items()):
        assert n1 == n2 and np.array_equal(a.astype(np.float64), b)


def test_checkpoint_round_trip(tmp_path):
    m = build(DcrNetConfig(na=8, nt=8, eta="1/8", rho=2, ablation="m1"), 5)
    x = np.random.default_rng(0).uniform(0, 1, (6, 2, 8, 8)).astype(np.float32)
    with Tape() as tape:  # a training step moves BN running statistics
        loss = mse_loss(m(Tensor(x)), Tensor(x))
    tape.backward(loss)
    path = tmp_path / "m.dcrc"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == m.config
    for (n1, a), (n2, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and a.dtype == b.dtype and np.array_equal(a, b)
    m.eval()
    assert np.array_equal(m(Tensor(x)).data, back(Tensor(x)).data)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.dcrc")
    with pytest.raises(DataError):
        read_checkpoint(io.BytesIO(b"XXXX" + bytes(64)))
    blob = checkpoint_bytes(build(DcrNetConfig(na=8, nt=8), 0))
    with pytest.raises(DataError):
        read_checkpoint(io.BytesIO(blob[: len(blob) // 2]))


def test_with_ablation():
    c = with_ablation(DcrNetConfig(rho=4), "baseline")
    assert c.ablation is Ablation.BASELINE and c.rho == 4
