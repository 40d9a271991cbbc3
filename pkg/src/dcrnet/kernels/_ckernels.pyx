# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: dilated/grouped conv2d, batch-norm statistics, PReLU.

Convolutions work on one zero-padded sample at a time. Output rows live in a
"wide" buffer of row pitch ``Wp`` (the padded width), so every kernel tap is a
fixed offset into the padded input and a run of ``(Ho - 1) * Wp + Wo`` outputs
is a sum of shifted input runs (see ``_conv.h``). The trailing columns of each
wide row are scratch and dropped when the result is cropped.

Callers (``dcrnet.kernels``) guarantee C-contiguous inputs of one dtype and
validated shapes.
"""

import numpy as np

from cython cimport floating
from libc.math cimport sqrt


cdef extern from "_simd.h" nogil:
    double dcr_dot_f32(const float *a, const float *b, Py_ssize_t n)
    double dcr_dot_f64(const double *a, const double *b, Py_ssize_t n)
    double dcr_sum_f32(const float *a, Py_ssize_t n)
    double dcr_sum_f64(const double *a, Py_ssize_t n)
    void dcr_prelu_f32(float *y, const float *x, float a, Py_ssize_t n)
    void dcr_prelu_f64(double *y, const double *x, double a, Py_ssize_t n)
    double dcr_prelu_back_f32(float *gx, const float *g, const float *x, float a, Py_ssize_t n)
    double dcr_prelu_back_f64(double *gx, const double *g, const double *x, double a, Py_ssize_t n)
    void dcr_bn_apply_f32(float *out, float *xh, const float *x, float m, float s,
                          float gm, float bt, Py_ssize_t n)
    void dcr_bn_apply_f64(double *out, double *xh, const double *x, double m, double s,
                          double gm, double bt, Py_ssize_t n)
    void dcr_bn_grad_f32(float *gx, const float *g, const float *xh, float scale, float mg,
                         float mgx, Py_ssize_t n)
    void dcr_bn_grad_f64(double *gx, const double *g, const double *xh, double scale, double mg,
                         double mgx, Py_ssize_t n)
    void dcr_copy_rows_f32(float *dst, Py_ssize_t dpitch, const float *src, Py_ssize_t spitch,
                           Py_ssize_t rows, Py_ssize_t n)
    void dcr_copy_rows_f64(double *dst, Py_ssize_t dpitch, const double *src, Py_ssize_t spitch,
                           Py_ssize_t rows, Py_ssize_t n)
    void dcr_moments_f32(const float *a, double c, Py_ssize_t n, double *s1, double *s2)
    void dcr_moments_f64(const double *a, double c, Py_ssize_t n, double *s1, double *s2)
    void dcr_bnp_apply_f32(float *y, const float *x, float m, float s, float gm, float bt,
                           float a, Py_ssize_t n)
    void dcr_bnp_apply_f64(double *y, const double *x, double m, double s, double gm, double bt,
                           double a, Py_ssize_t n)
    void dcr_bnp_sums_f32(const float *g, const float *x, float m, float s, float gm, float bt,
                          float a, Py_ssize_t n, double *sg, double *sgx, double *sa)
    void dcr_bnp_sums_f64(const double *g, const double *x, double m, double s, double gm,
                          double bt, double a, Py_ssize_t n, double *sg, double *sgx, double *sa)
    void dcr_bnp_grad_f32(float *gx, const float *g, const float *x, float m, float s, float gm,
                          float bt, float a, float scale, float mg, float mgx, Py_ssize_t n)
    void dcr_bnp_grad_f64(double *gx, const double *g, const double *x, double m, double s,
                          double gm, double bt, double a, double scale, double mg, double mgx,
                          Py_ssize_t n)


cdef extern from "_conv.h" nogil:
    enum: DCR_SLACK
    void dcr_taps_f32(float *dst, const float *src, const Py_ssize_t *off, const float *w,
                      Py_ssize_t ntaps, Py_ssize_t n)
    void dcr_taps_f64(double *dst, const double *src, const Py_ssize_t *off, const double *w,
                      Py_ssize_t ntaps, Py_ssize_t n)
    void dcr_tapdots_f32(double *out, const float *g, const float *src, const Py_ssize_t *off,
                         Py_ssize_t ntaps, Py_ssize_t n, void *scratch)
    void dcr_tapdots_f64(double *out, const double *g, const double *src, const Py_ssize_t *off,
                         Py_ssize_t ntaps, Py_ssize_t n, void *scratch)


cdef inline double _dot(const floating *a, const floating *b, Py_ssize_t n) noexcept nogil:
    if floating is float:
        return dcr_dot_f32(a, b, n)
    else:
        return dcr_dot_f64(a, b, n)


cdef inline double _sum(const floating *a, Py_ssize_t n) noexcept nogil:
    if floating is float:
        return dcr_sum_f32(a, n)
    else:
        return dcr_sum_f64(a, n)


cdef inline void _copy_rows(floating *dst, Py_ssize_t dpitch, const floating *src,
                            Py_ssize_t spitch, Py_ssize_t rows, Py_ssize_t n) noexcept nogil:
    if floating is float:
        dcr_copy_rows_f32(dst, dpitch, src, spitch, rows, n)
    else:
        dcr_copy_rows_f64(dst, dpitch, src, spitch, rows, n)


cdef inline void _pad_sample(floating *dst, const floating *src, Py_ssize_t C, Py_ssize_t H,
                             Py_ssize_t W, Py_ssize_t ph, Py_ssize_t pw) noexcept nogil:
    # borders of dst are zero and stay zero
    cdef Py_ssize_t c, Hp = H + 2 * ph, Wp = W + 2 * pw
    for c in range(C):
        _copy_rows(dst + (c * Hp + ph) * Wp + pw, Wp, src + c * H * W, W, H, W)


cdef inline void _taps(floating *dst, const floating *src, const Py_ssize_t *off,
                       const floating *w, Py_ssize_t ntaps, Py_ssize_t n) noexcept nogil:
    if floating is float:
        dcr_taps_f32(dst, src, off, w, ntaps, n)
    else:
        dcr_taps_f64(dst, src, off, w, ntaps, n)


cdef inline void _tapdots(double *out, const floating *g, const floating *src,
                          const Py_ssize_t *off, Py_ssize_t ntaps, Py_ssize_t n,
                          void *scratch) noexcept nogil:
    if floating is float:
        dcr_tapdots_f32(out, g, src, off, ntaps, n, scratch)
    else:
        dcr_tapdots_f64(out, g, src, off, ntaps, n, scratch)


cdef inline Py_ssize_t _round_up(Py_ssize_t n, Py_ssize_t m) noexcept nogil:
    return ((n + m - 1) // m) * m


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t dh, Py_ssize_t dw,
                   Py_ssize_t groups):
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], cpg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Hp = H + 2 * ph, Wp = W + 2 * pw
    cdef Py_ssize_t Ho = Hp - dh * (kh - 1), Wo = Wp - dw * (kw - 1)
    cdef Py_ssize_t P = Hp * Wp, L = (Ho - 1) * Wp + Wo, opg = Cout // groups
    cdef Py_ssize_t ntaps = cpg * kh * kw
    cdef Py_ssize_t vl = 64 // sizeof(floating)
    cdef Py_ssize_t Lr = _round_up(L, 4 * vl)
    cdef Py_ssize_t n, co, cl, u, v, t, g
    dtype = np.float32 if floating is float else np.float64

    y = np.empty((N, Cout, Ho, Wo), dtype=dtype)
    xp_arr = np.zeros(Cin * P + DCR_SLACK, dtype=dtype)
    acc_arr = np.empty(Lr, dtype=dtype)
    off_arr = np.empty(ntaps, dtype=np.intp)
    cdef floating[:, :, :, ::1] yv = y
    cdef floating[::1] xpv = xp_arr
    cdef floating[::1] accv = acc_arr
    cdef Py_ssize_t[::1] offv = off_arr
    t = 0
    for cl in range(cpg):
        for u in range(kh):
            for v in range(kw):
                offv[t] = cl * P + u * dh * Wp + v * dw
                t += 1

    cdef floating *xptr = &x[0, 0, 0, 0]
    cdef floating *wptr = &w[0, 0, 0, 0]
    cdef floating *yptr = &yv[0, 0, 0, 0]
    cdef floating *xp = &xpv[0]
    cdef floating *acc = &accv[0]
    cdef Py_ssize_t *off = &offv[0]

    with nogil:
        for n in range(N):
            _pad_sample(xp, xptr + n * Cin * H * W, Cin, H, W, ph, pw)
            for co in range(Cout):
                g = co // opg
                _taps(acc, xp + g * cpg * P, off, wptr + co * ntaps, ntaps, Lr)
                _copy_rows(yptr + (n * Cout + co) * Ho * Wo, Wo, acc, Wp, Ho, Wo)
    return y


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[:, :, :, ::1] gy,
                    Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t dh, Py_ssize_t dw,
                    Py_ssize_t groups, bint need_input, bint need_weight):
    """Return ``(grad_input, grad_weight)``; an entry is None when not requested.

    The input gradient is a transposed convolution: the output gradient sits in
    a buffer padded in front by the largest tap offset, so each padded input
    position gathers from it with negated offsets.
    """
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], cpg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Hp = H + 2 * ph, Wp = W + 2 * pw
    cdef Py_ssize_t Ho = Hp - dh * (kh - 1), Wo = Wp - dw * (kw - 1)
    cdef Py_ssize_t P = Hp * Wp, L = (Ho - 1) * Wp + Wo, opg = Cout // groups
    cdef Py_ssize_t khw = kh * kw, ntaps_in = opg * khw
    cdef Py_ssize_t vl = 64 // sizeof(floating)
    cdef Py_ssize_t front = (kh - 1) * dh * Wp + (kw - 1) * dw
    cdef Py_ssize_t Q = front + P + DCR_SLACK
    cdef Py_ssize_t Pr = _round_up(P, 4 * vl), Lv = _round_up(L, vl)
    cdef Py_ssize_t n, co, cl, ci, col, u, v, t, g
    dtype = np.float32 if floating is float else np.float64

    gx = np.empty((N, Cin, H, W), dtype=dtype) if need_input else np.empty((1, 1, 1, 1), dtype=dtype)
    gw_acc = np.zeros(Cout * cpg * khw, dtype=np.float64)
    xp_arr = np.zeros(Cin * P + DCR_SLACK, dtype=dtype)
    gxp_arr = np.empty(Pr, dtype=dtype)
    gyq_arr = np.zeros(Cout * Q + DCR_SLACK, dtype=dtype)
    scratch_arr = np.empty(khw * vl, dtype=dtype)
    # weights regrouped so each input channel's taps are contiguous
    wt_arr = np.ascontiguousarray(
        np.asarray(w).reshape(groups, opg, cpg, kh, kw).transpose(0, 2, 1, 3, 4)).reshape(-1)
    off_in_arr = np.empty(ntaps_in, dtype=np.intp)
    off_w_arr = np.empty(khw, dtype=np.intp)

    cdef floating[:, :, :, ::1] gxv = gx
    cdef double[::1] gwv = gw_acc
    cdef floating[::1] xpv = xp_arr
    cdef floating[::1] gxpv = gxp_arr
    cdef floating[::1] gyqv = gyq_arr
    cdef floating[::1] scv = scratch_arr
    cdef floating[::1] wtv = wt_arr
    cdef Py_ssize_t[::1] offinv = off_in_arr
    cdef Py_ssize_t[::1] offwv = off_w_arr
    t = 0
    for col in range(opg):
        for u in range(kh):
            for v in range(kw):
                offinv[t] = col * Q - (u * dh * Wp + v * dw)
                t += 1
    for u in range(kh):
        for v in range(kw):
            offwv[u * kw + v] = u * dh * Wp + v * dw

    cdef floating *xptr = &x[0, 0, 0, 0]
    cdef floating *gyptr = &gy[0, 0, 0, 0]
    cdef floating *gxptr = &gxv[0, 0, 0, 0]
    cdef double *gwptr = &gwv[0]
    cdef floating *xp = &xpv[0]
    cdef floating *gxp = &gxpv[0]
    cdef floating *gyq = &gyqv[0]
    cdef floating *wt = &wtv[0]
    cdef void *scratch = <void *>&scv[0]
    cdef Py_ssize_t *off_in = &offinv[0]
    cdef Py_ssize_t *off_w = &offwv[0]

    with nogil:
        for n in range(N):
            if need_weight:
                _pad_sample(xp, xptr + n * Cin * H * W, Cin, H, W, ph, pw)
            # scratch columns and the pad regions of gyq stay zero
            for co in range(Cout):
                _copy_rows(gyq + co * Q + front, Wp, gyptr + (n * Cout + co) * Ho * Wo, Wo, Ho, Wo)
            if need_input:
                for ci in range(Cin):
                    g = ci // cpg
                    _taps(gxp, gyq + g * opg * Q + front, off_in, wt + ci * ntaps_in, ntaps_in, Pr)
                    _copy_rows(gxptr + (n * Cin + ci) * H * W, W, gxp + ph * Wp + pw, Wp, H, W)
            if need_weight:
                for co in range(Cout):
                    g = co // opg
                    for cl in range(cpg):
                        ci = g * cpg + cl
                        _tapdots(gwptr + (co * cpg + cl) * khw, gyq + co * Q + front,
                                 xp + ci * P, off_w, khw, Lv, scratch)

    grad_input = gx if need_input else None
    grad_weight = gw_acc.astype(dtype).reshape(Cout, cpg, kh, kw) if need_weight else None
    return grad_input, grad_weight


cdef void _channel_moments(const floating *xptr, Py_ssize_t N, Py_ssize_t C, Py_ssize_t HW,
                           double eps, double *mean, double *var, double *invstd) noexcept nogil:
    # moments about each channel's first element limit cancellation
    cdef Py_ssize_t n, c
    cdef double M = <double>(N * HW), s1, s2, shift, m, var_c
    for c in range(C):
        shift = xptr[c * HW]
        s1 = 0.0
        s2 = 0.0
        for n in range(N):
            if floating is float:
                dcr_moments_f32(xptr + (n * C + c) * HW, shift, HW, &s1, &s2)
            else:
                dcr_moments_f64(xptr + (n * C + c) * HW, shift, HW, &s1, &s2)
        m = s1 / M
        var_c = s2 / M - m * m
        if var_c < 0.0:
            var_c = 0.0
        mean[c] = shift + m
        var[c] = var_c
        invstd[c] = 1.0 / sqrt(var_c + eps)


def batchnorm_forward_train(floating[:, :, :, ::1] x, floating[::1] gamma,
                            floating[::1] beta, double eps):
    """Normalize with batch statistics. Returns ``(y, xhat, mean, var, invstd)``;
    ``var`` is the biased batch variance."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3]
    cdef Py_ssize_t n, c, base

    y = np.empty_like(np.asarray(x))
    xhat = np.empty_like(y)
    mean = np.empty(C, dtype=np.float64)
    var = np.empty(C, dtype=np.float64)
    invstd = np.empty(C, dtype=np.float64)
    cdef floating[:, :, :, ::1] yv = y
    cdef floating[:, :, :, ::1] xhv = xhat
    cdef double[::1] meanv = mean
    cdef double[::1] varv = var
    cdef double[::1] isdv = invstd
    cdef floating *xptr = &x[0, 0, 0, 0]
    cdef floating *yptr = &yv[0, 0, 0, 0]
    cdef floating *xhptr = &xhv[0, 0, 0, 0]

    with nogil:
        _channel_moments(xptr, N, C, HW, eps, &meanv[0], &varv[0], &isdv[0])
        for c in range(C):
            for n in range(N):
                base = (n * C + c) * HW
                if floating is float:
                    dcr_bn_apply_f32(yptr + base, xhptr + base, xptr + base, <float>meanv[c],
                                     <float>isdv[c], gamma[c], beta[c], HW)
                else:
                    dcr_bn_apply_f64(yptr + base, xhptr + base, xptr + base, meanv[c],
                                     isdv[c], gamma[c], beta[c], HW)
    return y, xhat, mean, var, invstd


def batchnorm_backward(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] xhat,
                       floating[::1] gamma, double[::1] invstd):
    """Returns ``(grad_input, grad_gamma, grad_beta)`` for train-mode batch norm."""
    cdef Py_ssize_t N = gy.shape[0], C = gy.shape[1], HW = gy.shape[2] * gy.shape[3]
    cdef Py_ssize_t n, c, base
    cdef double M = <double>(N * HW), sg, sgx, scale
    dtype = np.float32 if floating is float else np.float64

    gx = np.empty_like(np.asarray(gy))
    ggamma = np.empty(C, dtype=dtype)
    gbeta = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] gxv = gx
    cdef floating[::1] ggv = ggamma
    cdef floating[::1] gbv = gbeta
    cdef floating *gyptr = &gy[0, 0, 0, 0]
    cdef floating *xhptr = &xhat[0, 0, 0, 0]
    cdef floating *gxptr = &gxv[0, 0, 0, 0]

    with nogil:
        for c in range(C):
            sg = 0.0
            sgx = 0.0
            for n in range(N):
                base = (n * C + c) * HW
                sg += _sum(gyptr + base, HW)
                sgx += _dot(gyptr + base, xhptr + base, HW)
            ggv[c] = <floating>sgx
            gbv[c] = <floating>sg
            scale = gamma[c] * invstd[c]
            for n in range(N):
                base = (n * C + c) * HW
                if floating is float:
                    dcr_bn_grad_f32(gxptr + base, gyptr + base, xhptr + base, <float>scale,
                                    <float>(sg / M), <float>(sgx / M), HW)
                else:
                    dcr_bn_grad_f64(gxptr + base, gyptr + base, xhptr + base, scale,
                                    sg / M, sgx / M, HW)
    return gx, ggamma, gbeta


def bn_prelu_forward_train(floating[:, :, :, ::1] x, floating[::1] gamma,
                           floating[::1] beta, floating alpha, double eps):
    """Batch norm (batch statistics) followed by PReLU.

    Returns ``(y, mean, var, invstd)`` with ``var`` the biased batch variance.
    """
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3]
    cdef Py_ssize_t n, c, base
    y = np.empty_like(np.asarray(x))
    mean = np.empty(C, dtype=np.float64)
    var = np.empty(C, dtype=np.float64)
    invstd = np.empty(C, dtype=np.float64)
    cdef floating[:, :, :, ::1] yv = y
    cdef double[::1] meanv = mean
    cdef double[::1] varv = var
    cdef double[::1] isdv = invstd
    cdef floating *xptr = &x[0, 0, 0, 0]
    cdef floating *yptr = &yv[0, 0, 0, 0]

    with nogil:
        _channel_moments(xptr, N, C, HW, eps, &meanv[0], &varv[0], &isdv[0])
        for c in range(C):
            for n in range(N):
                base = (n * C + c) * HW
                if floating is float:
                    dcr_bnp_apply_f32(yptr + base, xptr + base, <float>meanv[c], <float>isdv[c],
                                      gamma[c], beta[c], alpha, HW)
                else:
                    dcr_bnp_apply_f64(yptr + base, xptr + base, meanv[c], isdv[c],
                                      gamma[c], beta[c], alpha, HW)
    return y, mean, var, invstd


def bn_prelu_backward(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] x,
                      floating[::1] gamma, floating[::1] beta, floating alpha,
                      double[::1] mean, double[::1] invstd):
    """Returns ``(grad_input, grad_gamma, grad_beta, grad_alpha)``; x is the
    batch-norm input."""
    cdef Py_ssize_t N = gy.shape[0], C = gy.shape[1], HW = gy.shape[2] * gy.shape[3]
    cdef Py_ssize_t n, c, base
    cdef double M = <double>(N * HW), sg, sgx, sa = 0.0, scale
    cdef floating m, s
    dtype = np.float32 if floating is float else np.float64

    gx = np.empty_like(np.asarray(gy))
    ggamma = np.empty(C, dtype=dtype)
    gbeta = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] gxv = gx
    cdef floating[::1] ggv = ggamma
    cdef floating[::1] gbv = gbeta
    cdef floating *gyptr = &gy[0, 0, 0, 0]
    cdef floating *xptr = &x[0, 0, 0, 0]
    cdef floating *gxptr = &gxv[0, 0, 0, 0]

    with nogil:
        for c in range(C):
            m = <floating>mean[c]
            s = <floating>invstd[c]
            sg = 0.0
            sgx = 0.0
            for n in range(N):
                base = (n * C + c) * HW
                if floating is float:
                    dcr_bnp_sums_f32(gyptr + base, xptr + base, m, s, gamma[c], beta[c], alpha,
                                     HW, &sg, &sgx, &sa)
                else:
                    dcr_bnp_sums_f64(gyptr + base, xptr + base, m, s, gamma[c], beta[c], alpha,
                                     HW, &sg, &sgx, &sa)
            ggv[c] = <floating>sgx
            gbv[c] = <floating>sg
            scale = gamma[c] * invstd[c]
            for n in range(N):
                base = (n * C + c) * HW
                if floating is float:
                    dcr_bnp_grad_f32(gxptr + base, gyptr + base, xptr + base, m, s, gamma[c],
                                     beta[c], alpha, <float>scale, <float>(sg / M),
                                     <float>(sgx / M), HW)
                else:
                    dcr_bnp_grad_f64(gxptr + base, gyptr + base, xptr + base, m, s, gamma[c],
                                     beta[c], alpha, scale, sg / M, sgx / M, HW)
    return gx, ggamma, gbeta, sa


def prelu_forward(floating[::1] x, floating alpha):
    cdef Py_ssize_t n = x.shape[0]
    y = np.empty_like(np.asarray(x))
    cdef floating[::1] yv = y
    cdef floating *xp = &x[0]
    cdef floating *yp = &yv[0]
    with nogil:
        if floating is float:
            dcr_prelu_f32(yp, xp, alpha, n)
        else:
            dcr_prelu_f64(yp, xp, alpha, n)
    return y


def prelu_backward(floating[::1] x, floating alpha, floating[::1] gy):
    """Returns ``(grad_input, grad_alpha)``; x is the pre-activation input."""
    cdef Py_ssize_t n = x.shape[0]
    cdef double galpha
    gx = np.empty_like(np.asarray(gy))
    cdef floating[::1] gxv = gx
    cdef floating *xp = &x[0]
    cdef floating *gp = &gy[0]
    cdef floating *gxp = &gxv[0]
    with nogil:
        if floating is float:
            galpha = dcr_prelu_back_f32(gxp, gp, xp, alpha, n)
        else:
            galpha = dcr_prelu_back_f64(gxp, gp, xp, alpha, n)
    return gx, galpha
