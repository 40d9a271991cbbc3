"""Independent reference implementations and frozen reference values.

Nothing here imports the model or analyzer code paths under test; the
closed-form counts were derived by hand from the layer list.
"""

import numpy as np

# Published complexity figures (thousands of parameters, millions of FLOPs).
TABLE_PARAMS_K = {
    1: {"1/4": 2102, "1/8": 1053, "1/16": 528, "1/32": 266},
    10: {"1/4": 2115, "1/8": 1066, "1/16": 542, "1/32": 279},
}
TABLE_FLOPS_M = {"1/4": 4.01, "1/8": 2.96, "1/16": 2.44, "1/32": 2.18}
ABLATION_NMSE_DB = {"baseline": -11.28, "m1": -11.41, "full": -11.74}  # eta 1/16, indoor

# Hand-derived totals, frozen. L = floor(2048 * eta) is the codeword length.
#   params = 4097 L + 2472 + 1216 rho        (BN affine and PReLU slopes included)
#   conv weights = 332 + 1024 rho, FC MACs = 2 * 2048 L
#   conv output channels = 32 + 96 rho, three residual adds of 2 channels
FROZEN_PARAMS = {
    (1, "1/4"): 2_101_352, (1, "1/8"): 1_052_520, (1, "1/16"): 528_104, (1, "1/32"): 265_896,
    (10, "1/4"): 2_112_296, (10, "1/8"): 1_063_464, (10, "1/16"): 539_048, (10, "1/32"): 276_840,
}
FROZEN_FLOPS_MAC1 = {"1/4": 3_885_056, "1/8": 2_836_480, "1/16": 2_312_192, "1/32": 2_050_048}


def codeword_len(eta_num, eta_den, na=32, nt=32):
    return (2 * na * nt * eta_num) // eta_den


def closed_form_params(rho, L):
    return 4097 * L + 2472 + 1216 * rho


def closed_form_flops(rho, L, hw=1024, mac=1, elementwise=True):
    macs = (332 + 1024 * rho) * hw + 2 * 2048 * L
    extra = (3 * (32 + 96 * rho) * hw + 3 * 2 * hw) if elementwise else 0
    return mac * macs + extra


def naive_conv2d(x, w, padding, dilation, groups=1):
    """Direct loop evaluation of a zero-padded, dilated, grouped convolution."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    ph, pw = padding
    dh, dw = dilation
    ho = h + 2 * ph - (kh - 1) * dh - 1 + 1
    wo = wd + 2 * pw - (kw - 1) * dw - 1 + 1
    opg = cout // groups
    y = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for co in range(cout):
            g = co // opg
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for cl in range(cpg):
                        ci = g * cpg + cl
                        for u in range(kh):
                            for v in range(kw):
                                r = i - ph + u * dh
                                c = j - pw + v * dw
                                if 0 <= r < h and 0 <= c < wd:
                                    s += w[co, cl, u, v] * x[b, ci, r, c]
                    y[b, co, i, j] = s
    return y


def naive_batchnorm(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, np.float64)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    xh = (x - mean) / np.sqrt(var + eps)
    return xh * gamma[None, :, None, None] + beta[None, :, None, None]


def naive_prelu(x, a):
    return np.where(x >= 0, x, a * x)


def central_diff(f, arrays, eps=1e-6, entries=None, rng=None):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arrays``.

    ``f`` reads the arrays in place. With ``entries`` set, that many random
    flat positions per array are probed. ``eps`` may be a tuple of step sizes;
    the result maps array index to ``(flat positions, values)`` with values of
    shape ``(len(eps), n)`` in that case and ``(n,)`` otherwise.
    """
    steps = tuple(eps) if isinstance(eps, (tuple, list)) else (eps,)
    out = {}
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        if entries is None or entries >= flat.size:
            pos = np.arange(flat.size)
        else:
            pos = rng.choice(flat.size, size=entries, replace=False)
        vals = np.empty((len(steps), pos.size))
        for t, p in enumerate(pos):
            old = flat[p]
            for s, h in enumerate(steps):
                flat[p] = old + h
                fp = f()
                flat[p] = old - h
                fm = f()
                flat[p] = old
                vals[s, t] = (fp - fm) / (2 * h)
        out[k] = (pos, vals if isinstance(eps, (tuple, list)) else vals[0])
    return out


def op_gradient_error(f, leaves, backward, eps=1e-6):
    """Worst relative error of ``backward`` gradients against central differences.

    ``backward()`` must populate ``t.grad`` on each leaf (None counts as zero).
    Entries far below a tensor's largest derivative are compared on that
    tensor's scale (floor 1e-4 of the max), where roundoff would dominate.
    """
    backward()
    fd = central_diff(f, [t.data for t in leaves], eps=eps)
    worst = 0.0
    for k, t in enumerate(leaves):
        got = np.zeros(t.shape) if t.grad is None else t.grad
        floor = max(1e-4 * float(np.abs(fd[k][1]).max()), 1e-8)
        worst = max(worst, float(rel_error(got.reshape(-1), fd[k][1], floor).max()))
    return worst


def kink_tolerant_error(grad, fd_steps, floor):
    """Per-entry relative error against the best of several step sizes.

    With PReLU in the network a perturbation can push some activation
    across zero, corrupting the difference quotient at that one step; an
    autodiff bug would disagree at every step.
    """
    return np.min([rel_error(grad, v, floor) for v in fd_steps], axis=0)


def rel_error(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def nmse_direct_db(h_ref, h_est):
    """Mean per-sample NMSE in dB from complex matrices, written out longhand."""
    ratios = []
    for r, e in zip(h_ref, h_est):
        num = sum(abs(r[i, j] - e[i, j]) ** 2 for i in range(r.shape[0]) for j in range(r.shape[1]))
        den = sum(abs(r[i, j]) ** 2 for i in range(r.shape[0]) for j in range(r.shape[1]))
        ratios.append(num / den)
    return 10 * np.log10(np.mean(ratios))
