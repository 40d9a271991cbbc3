import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcrnet import kernels
from oracles import naive_batchnorm, naive_conv2d, naive_prelu

from conftest import BACKENDS


@st.composite
def conv_case(draw):
    groups = draw(st.sampled_from([1, 1, 2, 3]))
    cin = groups * draw(st.integers(1, 2))
    cout = groups * draw(st.integers(1, 2))
    kh, kw = draw(st.integers(1, 5)), draw(st.integers(1, 5))
    dh, dw = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    ph, pw = draw(st.integers(0, 4)), draw(st.integers(0, 4))
    lo_h = max(1, (kh - 1) * dh + 1 - 2 * ph)
    lo_w = max(1, (kw - 1) * dw + 1 - 2 * pw)
    h = draw(st.integers(lo_h, lo_h + 5))
    w = draw(st.integers(lo_w, lo_w + 5))
    n = draw(st.integers(1, 2))
    seed = draw(st.integers(0, 2**31))
    return n, cin, cout, groups, (kh, kw), (dh, dw), (ph, pw), (h, w), seed


def _arrays(case, dtype):
    n, cin, cout, groups, k, d, p, hw, seed = case
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, cin) + hw).astype(dtype)
    w = r.standard_normal((cout, cin // groups) + k).astype(dtype)
    return x, w


@pytest.mark.parametrize("name", BACKENDS)
@settings(max_examples=60, deadline=None)
@given(case=conv_case())
def test_conv_forward_matches_loops(name, case):
    impl = kernels.get_backend(name)
    _, _, _, groups, _, d, p, _, _ = case
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 2e-5)):
        x, w = _arrays(case, dtype)
        y = kernels.conv2d_forward(x, w, p, d, groups, impl=impl)
        ref = naive_conv2d(x, w, p, d, groups)
        assert y.dtype == dtype and y.shape == ref.shape
        np.testing.assert_allclose(y, ref, rtol=tol, atol=tol * 10)


@pytest.mark.parametrize("name", BACKENDS)
@settings(max_examples=60, deadline=None)
@given(case=conv_case())
def test_conv_backward_is_adjoint(name, case):
    # y is bilinear in (x, w): <y, gy> = <x, gx> = <w, gw>
    impl = kernels.get_backend(name)
    n, cin, cout, groups, k, d, p, hw, seed = case
    x, w = _arrays(case, np.float64)
    y = kernels.conv2d_forward(x, w, p, d, groups, impl=impl)
    gy = np.random.default_rng(seed + 1).standard_normal(y.shape)
    gx, gw = kernels.conv2d_backward(x, w, gy, p, d, groups, impl=impl)
    lhs = float(np.sum(y * gy))
    assert gx.shape == x.shape and gw.shape == w.shape
    assert abs(float(np.sum(x * gx)) - lhs) <= 1e-10 * (1 + abs(lhs))
    assert abs(float(np.sum(w * gw)) - lhs) <= 1e-10 * (1 + abs(lhs))


@pytest.mark.parametrize("name", BACKENDS)
def test_conv_backward_flags(name, rng):
    impl = kernels.get_backend(name)
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    gy = rng.standard_normal((2, 2, 6, 6))
    gx, gw = kernels.conv2d_backward(x, w, gy, (1, 1), (1, 1), 1, need_input=False, impl=impl)
    assert gx is None and gw is not None
    gx, gw = kernels.conv2d_backward(x, w, gy, (1, 1), (1, 1), 1, need_weight=False, impl=impl)
    assert gw is None and gx is not None


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_undilated_conv_is_bit_identical_to_reference(name, dtype, rng):
    # small integers keep every product and partial sum exact in floating point
    impl = kernels.get_backend(name)
    x = rng.integers(-4, 5, (2, 3, 9, 8)).astype(dtype)
    w = rng.integers(-3, 4, (4, 3, 3, 5)).astype(dtype)
    y = kernels.conv2d_forward(x, w, (1, 2), (1, 1), 1, impl=impl)
    ref = naive_conv2d(x, w, (1, 2), (1, 1), 1)
    assert np.array_equal(y, ref.astype(dtype))


@pytest.mark.parametrize("name", BACKENDS)
def test_depthwise_equals_independent_channels(name, rng):
    impl = kernels.get_backend(name)
    c = 5
    x = rng.standard_normal((2, c, 7, 7))
    w = rng.standard_normal((c, 1, 3, 1))
    y = kernels.conv2d_forward(x, w, (3, 0), (3, 1), c, impl=impl)
    for i in range(c):
        yi = kernels.conv2d_forward(x[:, i:i + 1].copy(), w[i:i + 1].copy(), (3, 0), (3, 1), 1,
                                    impl=impl)
        np.testing.assert_allclose(y[:, i:i + 1], yi, rtol=1e-13, atol=1e-13)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
def test_backends_agree_on_model_sized_layers(rng):
    cy, py = kernels.get_backend("cython"), kernels.get_backend("python")
    for cin, cout, k, d, groups in [(2, 8, (3, 3), (2, 2), 1), (8, 8, (5, 1), (1, 1), 8),
                                    (8, 2, (3, 1), (1, 1), 1), (4, 2, (1, 1), (1, 1), 1)]:
        x = rng.standard_normal((3, cin, 32, 32)).astype(np.float32)
        w = rng.standard_normal((cout, cin // groups) + k).astype(np.float32)
        gy = rng.standard_normal((3, cout, 32, 32)).astype(np.float32)
        p = ((k[0] - 1) * d[0] // 2, (k[1] - 1) * d[1] // 2)
        np.testing.assert_allclose(kernels.conv2d_forward(x, w, p, d, groups, impl=cy),
                                   kernels.conv2d_forward(x, w, p, d, groups, impl=py),
                                   rtol=1e-4, atol=1e-4)
        for a, b in zip(kernels.conv2d_backward(x, w, gy, p, d, groups, impl=cy),
                        kernels.conv2d_backward(x, w, gy, p, d, groups, impl=py)):
            np.testing.assert_allclose(a, b, rtol=1e-4, atol=2e-3)


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_batchnorm_kernels(name, dtype, rng):
    impl = kernels.get_backend(name)
    x = (rng.standard_normal((4, 3, 5, 6)) * 3 + 7).astype(dtype)
    gamma = rng.uniform(0.5, 2, 3).astype(dtype)
    beta = rng.standard_normal(3).astype(dtype)
    y, xhat, mean, var, invstd = kernels.batchnorm_forward_train(x, gamma, beta, 1e-5, impl=impl)
    tol = 1e-10 if dtype == np.float64 else 1e-4
    np.testing.assert_allclose(y, naive_batchnorm(x, gamma, beta), rtol=tol, atol=tol)
    np.testing.assert_allclose(mean, x.astype(np.float64).mean(axis=(0, 2, 3)), rtol=tol)
    np.testing.assert_allclose(var, x.astype(np.float64).var(axis=(0, 2, 3)), rtol=tol)

    # backward against the closed form
    g = rng.standard_normal(x.shape).astype(dtype)
    gx, ggamma, gbeta = kernels.batchnorm_backward(g, xhat, gamma, invstd, impl=impl)
    xh = xhat.astype(np.float64)
    g64 = g.astype(np.float64)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    sg = g64.sum(axis=(0, 2, 3), keepdims=True)
    sgx = (g64 * xh).sum(axis=(0, 2, 3), keepdims=True)
    ref = (gamma[None, :, None, None] * invstd[None, :, None, None] / m) * (m * g64 - sg - xh * sgx)
    np.testing.assert_allclose(gx, ref, rtol=tol * 10, atol=tol * 10)
    np.testing.assert_allclose(ggamma, sgx.reshape(-1), rtol=tol * 10, atol=tol * 10)
    np.testing.assert_allclose(gbeta, sg.reshape(-1), rtol=tol * 10, atol=tol * 10)


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_fused_bn_prelu_matches_chain(name, dtype, rng):
    impl = kernels.get_backend(name)
    py = kernels.get_backend("python")
    x = (rng.standard_normal((3, 4, 6, 5)) * 2 - 1).astype(dtype)
    gamma = rng.uniform(0.5, 2, 4).astype(dtype)
    beta = rng.standard_normal(4).astype(dtype)
    a = 0.25
    y, mean, var, invstd = kernels.bn_prelu_forward_train(x, gamma, beta, a, 1e-5, impl=impl)
    tol = 1e-10 if dtype == np.float64 else 1e-4
    np.testing.assert_allclose(y, naive_prelu(naive_batchnorm(x, gamma, beta), a), rtol=tol,
                               atol=tol)

    g = rng.standard_normal(x.shape).astype(dtype)
    gx, ggamma, gbeta, galpha = kernels.bn_prelu_backward(g, x, gamma, beta, a, mean, invstd,
                                                          impl=impl)
    # unfused chain: batch norm, then PReLU, each through its own kernel
    z, xhat, _, _, inv2 = kernels.batchnorm_forward_train(x, gamma, beta, 1e-5, impl=py)
    gz, ga = kernels.prelu_backward(z, a, g, impl=py)
    gx2, gg2, gb2 = kernels.batchnorm_backward(gz, xhat, gamma, inv2, impl=py)
    for got, ref in ((gx, gx2), (ggamma, gg2), (gbeta, gb2)):
        np.testing.assert_allclose(got, ref, rtol=tol * 10, atol=tol * 10)
    assert abs(galpha - ga) <= tol * 10 * (1 + abs(ga))


@pytest.mark.parametrize("name", BACKENDS)
def test_prelu_kernels(name):
    impl = kernels.get_backend(name)
    x = np.array([2.0, -3.0, 0.0, -1.0])
    y = kernels.prelu_forward(x, 0.25, impl=impl)
    assert y.tolist() == [2.0, -0.75, 0.0, -0.25]
    gx, ga = kernels.prelu_backward(x, 0.25, np.ones(4), impl=impl)
    assert gx.tolist() == [1.0, 0.25, 1.0, 0.25]
    assert ga == pytest.approx(-4.0)


def test_backend_selection():
    assert kernels.BACKEND in kernels.available_backends()
    assert "python" in kernels.available_backends()
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_forced_python_backend_in_subprocess():
    import subprocess
    import sys
    code = "from dcrnet import kernels; print(kernels.BACKEND)"
    env = dict(__import__("os").environ, DCRNET_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"
