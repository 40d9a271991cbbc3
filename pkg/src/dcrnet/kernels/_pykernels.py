"""Pure numpy fallback for the compiled kernels (same signatures).

A convolution is evaluated tap by tap: for kernel offset ``(u, v)`` the padded
input is sliced at ``(u * dh, v * dw)`` and contracted against the matching
weight column, so the cost stays ``kh * kw`` vectorized contractions.
"""

import numpy as np


def _out_hw(H, W, kh, kw, ph, pw, dh, dw):
    return H + 2 * ph - dh * (kh - 1), W + 2 * pw - dw * (kw - 1)


def conv2d_forward(x, w, ph, pw, dh, dw, groups):
    N, Cin, H, W = x.shape
    Cout, cpg, kh, kw = w.shape
    Ho, Wo = _out_hw(H, W, kh, kw, ph, pw, dh, dw)
    opg = Cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xg = xp.reshape(N, groups, cpg, H + 2 * ph, W + 2 * pw)
    wg = w.reshape(groups, opg, cpg, kh, kw)
    y = np.zeros((N, groups, opg, Ho, Wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xg[:, :, :, u * dh:u * dh + Ho, v * dw:v * dw + Wo]
            y += np.einsum("goc,ngchw->ngohw", wg[:, :, :, u, v], xs)
    return y.reshape(N, Cout, Ho, Wo)


def conv2d_backward(x, w, gy, ph, pw, dh, dw, groups, need_input, need_weight):
    N, Cin, H, W = x.shape
    Cout, cpg, kh, kw = w.shape
    Ho, Wo = _out_hw(H, W, kh, kw, ph, pw, dh, dw)
    opg = Cout // groups
    gyg = gy.reshape(N, groups, opg, Ho, Wo)
    wg = w.reshape(groups, opg, cpg, kh, kw)
    xg = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))).reshape(
        N, groups, cpg, H + 2 * ph, W + 2 * pw)
    gxp = np.zeros_like(xg) if need_input else None
    gw = np.zeros((groups, opg, cpg, kh, kw), dtype=np.float64) if need_weight else None
    for u in range(kh):
        for v in range(kw):
            rows = slice(u * dh, u * dh + Ho)
            cols = slice(v * dw, v * dw + Wo)
            if need_input:
                gxp[:, :, :, rows, cols] += np.einsum("goc,ngohw->ngchw", wg[:, :, :, u, v], gyg)
            if need_weight:
                gw[:, :, :, u, v] = np.einsum("ngohw,ngchw->goc", gyg, xg[:, :, :, rows, cols])
    grad_input = None
    if need_input:
        grad_input = np.ascontiguousarray(
            gxp.reshape(N, Cin, H + 2 * ph, W + 2 * pw)[:, :, ph:ph + H, pw:pw + W])
    grad_weight = gw.astype(x.dtype).reshape(w.shape) if need_weight else None
    return grad_input, grad_weight


def batchnorm_forward_train(x, gamma, beta, eps):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + eps)
    m = mean.astype(x.dtype)[None, :, None, None]
    s = invstd.astype(x.dtype)[None, :, None, None]
    xhat = (x - m) * s
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, mean, var, invstd


def batchnorm_backward(gy, xhat, gamma, invstd):
    M = gy.shape[0] * gy.shape[2] * gy.shape[3]
    sg = gy.astype(np.float64).sum(axis=(0, 2, 3))
    sgx = (gy.astype(np.float64) * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * invstd).astype(gy.dtype)[None, :, None, None]
    mg = (sg / M).astype(gy.dtype)[None, :, None, None]
    mgx = (sgx / M).astype(gy.dtype)[None, :, None, None]
    gx = scale * (gy - mg - xhat * mgx)
    return gx, sgx.astype(gy.dtype), sg.astype(gy.dtype)


def prelu_forward(x, alpha):
    return np.where(x >= 0, x, x.dtype.type(alpha) * x)


def prelu_backward(x, alpha, gy):
    neg = x < 0
    gx = np.where(neg, gy.dtype.type(alpha) * gy, gy)
    galpha = float(np.sum(gy[neg].astype(np.float64) * x[neg]))
    return gx, galpha


def _bchan(v, dtype):
    return np.asarray(v).astype(dtype)[None, :, None, None]


def bn_prelu_forward_train(x, gamma, beta, alpha, eps):
    y, _, mean, var, invstd = batchnorm_forward_train(x, gamma, beta, eps)
    return prelu_forward(y, alpha), mean, var, invstd


def bn_prelu_backward(gy, x, gamma, beta, alpha, mean, invstd):
    dt = gy.dtype
    xhat = (x - _bchan(mean, dt)) * _bchan(invstd, dt)
    z = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    gz, galpha = prelu_backward(z, alpha, gy)
    gx, ggamma, gbeta = batchnorm_backward(gz, xhat, gamma, invstd)
    return gx, ggamma, gbeta, galpha
