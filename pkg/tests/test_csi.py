import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcrnet.csi import (
    AngularDelayMatrix,
    GeneratorParams,
    NormMeta,
    block_sparsity,
    denormalize,
    dft_transform,
    energy_retained,
    fit_norm,
    from_real_view,
    generate_splits,
    inverse_dft,
    load_datasets,
    normalize,
    read_datasets,
    sample_rng,
    save_datasets,
    synth_angular_delay,
    synth_channel,
    synth_generate,
    to_real_view,
    truncate,
    write_datasets,
    zero_pad,
)
from dcrnet.errors import ConfigError, DataError

SMALL = GeneratorParams(na=8, nt=8, nc=64)


def _random_channels(n, nc=64, nt=32, seed=0, dtype=np.complex64):
    r = np.random.default_rng(seed)
    return (r.standard_normal((n, nc, nt)) + 1j * r.standard_normal((n, nc, nt))).astype(dtype)


def test_dft_is_unitary_at_32_bit():
    H = _random_channels(100)
    Ht = dft_transform(H).astype(np.complex64)
    n_in = np.linalg.norm(H.reshape(100, -1), axis=1)
    n_out = np.linalg.norm(Ht.reshape(100, -1), axis=1)
    np.testing.assert_allclose(n_out, n_in, rtol=1e-4)
    back = inverse_dft(Ht).astype(np.complex64)
    assert np.max(np.abs(back - H)) < 1e-5


def test_dft_round_trip_at_64_bit():
    H = _random_channels(5, dtype=np.complex128)
    assert np.max(np.abs(inverse_dft(dft_transform(H)) - H)) < 1e-10


def test_dft_of_zeros():
    assert not np.any(dft_transform(np.zeros((16, 8), complex)))


@pytest.mark.parametrize("tau,theta", [(0, 0), (3, 5), (17, 31), (63, 1)])
def test_single_path_concentrates_on_one_entry(tau, theta):
    nc, nt = 64, 32
    n = np.arange(nc)[:, None]
    t = np.arange(nt)[None, :]
    H = np.exp(-2j * np.pi * n * tau / nc) * np.exp(-2j * np.pi * t * theta / nt)
    mag = np.abs(dft_transform(H))
    peak = np.unravel_index(np.argmax(mag), mag.shape)
    assert peak == ((-tau) % nc, (-theta) % nt)
    off = mag.copy()
    off[peak] = 0
    assert off.max() < 1e-4 * mag[peak]


def test_truncation_shapes_and_identity():
    Ht = _random_channels(1, nc=1024, nt=32)[0]
    assert truncate(Ht, 32).shape == (32, 32)
    assert np.array_equal(truncate(Ht, 1024), Ht)
    for bad in (0, 1025):
        with pytest.raises(ConfigError):
            truncate(Ht, bad)
    assert zero_pad(truncate(Ht, 32), 1024).shape == (1024, 32)


def test_truncate_pad_inverse_is_a_projection():
    H = _random_channels(3, dtype=np.complex128)

    def P(x):
        return inverse_dft(zero_pad(truncate(dft_transform(x), 8), 64))

    once = P(H)
    np.testing.assert_allclose(P(once), once, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.sampled_from([np.float32,
                                                                                 np.float64]))
def test_real_view_round_trip_is_exact(n, na, nt, dtype):
    x = np.random.default_rng(n * 100 + na * 10 + nt).standard_normal((n, 2, na, nt)).astype(dtype)
    assert np.array_equal(to_real_view(from_real_view(x), dtype), x)
    m = AngularDelayMatrix.from_real(x)
    assert np.array_equal(m.real_view(), x)


def test_generator_energy_is_inside_the_truncation_window():
    p = GeneratorParams()
    for i in range(20):
        Ht = synth_angular_delay(sample_rng(3, 0, i), p)
        assert energy_retained(Ht, p.na) >= 0.95
    # and through the full spatial-frequency round trip
    H = synth_channel(sample_rng(3, 0, 0), p)
    assert energy_retained(dft_transform(H), p.na) >= 0.95


def test_generator_block_sparsity_on_1000_samples():
    ds = synth_generate(1000, GeneratorParams(), seed=11)
    assert block_sparsity(ds.angular_delay()) >= 0.5


def test_generator_determinism_and_seed_sensitivity():
    a = generate_splits({"train": 6, "val": 2}, SMALL, seed=4)
    b = generate_splits({"train": 6, "val": 2}, SMALL, seed=4)
    c = generate_splits({"train": 6, "val": 2}, SMALL, seed=5)
    assert np.array_equal(a["train"].data, b["train"].data)
    assert np.array_equal(a["val"].data, b["val"].data)
    assert not np.array_equal(a["train"].data, c["train"].data)
    # splits draw from separate streams: adding one leaves the raw samples unchanged
    d = generate_splits({"train": 6}, SMALL, seed=4)
    np.testing.assert_allclose(d["train"].denormalized(), a["train"].denormalized(), atol=1e-6)


def test_generated_data_is_normalized_and_invertible():
    splits = generate_splits({"train": 20, "val": 5, "test": 5}, SMALL, seed=1)
    lo = min(float(s.data.min()) for s in splits.values())
    hi = max(float(s.data.max()) for s in splits.values())
    assert lo == 0.0 and hi == 1.0
    for s in splits.values():
        assert s.data.dtype == np.float32 and s.norm == splits["train"].norm
        raw = s.denormalized()
        again, _ = normalize(raw, s.norm)
        np.testing.assert_allclose(again, s.data, atol=1e-6)


def test_normalization_examples():
    y, meta = normalize(np.array([-1.0, 1.0, 3.0]))
    assert meta == NormMeta(-1.0, 3.0)
    assert y.tolist() == [0.0, 0.5, 1.0]
    x = np.random.default_rng(0).standard_normal(50)
    y, meta = normalize(x)
    np.testing.assert_allclose(denormalize(y, meta), x, atol=1e-6)
    with pytest.raises(DataError):
        normalize(np.full(10, 0.3))
    with pytest.raises(DataError):
        fit_norm(np.array([0.0, np.nan]))


def test_generator_parameter_validation():
    for bad in (dict(clusters=(0, 2)), dict(clusters=(3, 2)), dict(decay=0.0),
                dict(spread=-1.0), dict(onset=0.0), dict(na=2000), dict(nc=0)):
        with pytest.raises(ConfigError):
            GeneratorParams(**bad)
    with pytest.raises(ConfigError):
        generate_splits({"holdout": 3}, SMALL, 0)
    with pytest.raises(ConfigError):
        generate_splits({"train": 0}, SMALL, 0)


def test_dataset_file_round_trip(tmp_path):
    p = GeneratorParams(na=8, nt=8, nc=64, clusters=(2, 4), decay=3.0, spread=1.5)
    splits = generate_splits({"train": 7, "test": 3}, p, seed=9)
    path = tmp_path / "d.dcrd"
    save_datasets(path, splits)
    back = load_datasets(path)
    assert sorted(back) == ["test", "train"]
    for name in splits:
        assert np.array_equal(back[name].data, splits[name].data)
        assert back[name].norm == splits[name].norm
        assert back[name].params == p and back[name].seed == 9


def test_dataset_file_errors(tmp_path):
    with pytest.raises(DataError):
        load_datasets(tmp_path / "nope.dcrd")
    with pytest.raises(DataError):
        read_datasets(io.BytesIO(b"NOPE" + bytes(80)))
    buf = io.BytesIO()
    write_datasets(buf, generate_splits({"train": 3}, SMALL, 0))
    with pytest.raises(DataError):
        read_datasets(io.BytesIO(buf.getvalue()[:-10]))
