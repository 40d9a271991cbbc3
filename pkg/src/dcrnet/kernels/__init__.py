"""Hot numerical kernels with backend selection at import time.

The compiled Cython extension is used when it is importable; otherwise the
pure numpy implementation is used. ``DCRNET_BACKEND=python`` forces the
fallback. Both backends expose the same functions, and ``get_backend(name)``
returns either one explicitly (used by tests and the benchmark).

On glibc the allocator is told to keep freed memory instead of returning it to
the OS: training allocates and frees the same multi-megabyte activation
buffers every step, and re-faulting those pages otherwise costs more than the
arithmetic. ``DCRNET_NO_MALLOPT=1`` leaves the allocator alone.
"""

import ctypes
import ctypes.util
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def _tune_allocator():
    if os.environ.get("DCRNET_NO_MALLOPT"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):  # not glibc
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = mallopt(_M_MMAP_THRESHOLD, 1 << 30)
    ok &= mallopt(_M_TRIM_THRESHOLD, 2**31 - 1)
    return bool(ok)


ALLOCATOR_TUNED = _tune_allocator()

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available "
                         f"(have: {', '.join(available_backends())})") from None


def _select():
    forced = os.environ.get("DCRNET_BACKEND", "").strip().lower()
    if forced:
        return forced, get_backend(forced)
    if _ckernels is not None:
        return "cython", _ckernels
    return "python", _pykernels


BACKEND, _impl = _select()


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def conv2d_forward(x, w, padding, dilation, groups, impl=None):
    impl = impl or _impl
    dt = x.dtype
    return impl.conv2d_forward(_c(x, dt), _c(w, dt), padding[0], padding[1],
                               dilation[0], dilation[1], groups)


def conv2d_backward(x, w, gy, padding, dilation, groups,
                    need_input=True, need_weight=True, impl=None):
    impl = impl or _impl
    dt = x.dtype
    return impl.conv2d_backward(_c(x, dt), _c(w, dt), _c(gy, dt), padding[0], padding[1],
                                dilation[0], dilation[1], groups,
                                bool(need_input), bool(need_weight))


def batchnorm_forward_train(x, gamma, beta, eps, impl=None):
    impl = impl or _impl
    dt = x.dtype
    return impl.batchnorm_forward_train(_c(x, dt), _c(gamma, dt), _c(beta, dt), float(eps))


def batchnorm_backward(gy, xhat, gamma, invstd, impl=None):
    impl = impl or _impl
    dt = gy.dtype
    return impl.batchnorm_backward(_c(gy, dt), _c(xhat, dt), _c(gamma, dt),
                                   _c(invstd, np.float64))


def bn_prelu_forward_train(x, gamma, beta, alpha, eps, impl=None):
    impl = impl or _impl
    dt = x.dtype
    return impl.bn_prelu_forward_train(_c(x, dt), _c(gamma, dt), _c(beta, dt),
                                       dt.type(alpha), float(eps))


def bn_prelu_backward(gy, x, gamma, beta, alpha, mean, invstd, impl=None):
    impl = impl or _impl
    dt = gy.dtype
    return impl.bn_prelu_backward(_c(gy, dt), _c(x, dt), _c(gamma, dt), _c(beta, dt),
                                  dt.type(alpha), _c(mean, np.float64), _c(invstd, np.float64))


def prelu_forward(x, alpha, impl=None):
    impl = impl or _impl
    flat = _c(x, x.dtype).reshape(-1)
    return impl.prelu_forward(flat, x.dtype.type(alpha)).reshape(x.shape)


def prelu_backward(x, alpha, gy, impl=None):
    impl = impl or _impl
    flat = _c(x, x.dtype).reshape(-1)
    gflat = _c(gy, x.dtype).reshape(-1)
    gx, galpha = impl.prelu_backward(flat, x.dtype.type(alpha), gflat)
    return gx.reshape(x.shape), galpha
