"""Dense tensors with tape-based reverse-mode differentiation.

Only the operators DCRNet needs are provided. Operations executed while a
:class:`Tape` is active are recorded; ``tape.backward(loss)`` replays them in
reverse recording order and accumulates ``+=`` into ``Parameter.grad`` (and
into ``.grad`` of any leaf tensor created with ``requires_grad=True``).
Outside a tape, operations run without recording anything.

    with Tape() as tape:
        loss = mse_loss(model(x), x)
    tape.backward(loss)
"""

import threading
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, UsageError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """N-d real array (row-major) plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_interior")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ConfigError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if any(d < 1 for d in arr.shape):
            raise DimensionError("Tensor", "all dimensions >= 1", arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._interior = False  # True when produced by a recorded operation

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor with a name and an always-allocated gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward", "needs")

    def __init__(self, inputs, output, backward, needs):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.needs = needs


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Recording order is a topological order of the graph, so walking it
    backwards visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, output, backward):
        needs = tuple(t.requires_grad for t in inputs)
        if any(needs):
            output.requires_grad = True
            output._interior = True
            self.nodes.append(_Node(inputs, output, backward, needs))

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim > 1:
            raise UsageError("backward() needs a scalar loss tensor")
        if not loss._interior:
            return  # constant loss: nothing upstream depends on parameters
        if not any(node.output is loss for node in self.nodes):
            raise UsageError("loss was not produced on this tape")
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g, node.needs)
            for inp, gi, need in zip(node.inputs, grads, node.needs):
                if not need or gi is None:
                    continue
                if inp._interior:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype)
                else:
                    inp.grad += gi

    def clear(self):
        self.nodes.clear()


def backward(loss, tape):
    tape.backward(loss)


def _result(data, inputs, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None:
        tape.record(inputs, out, backward_fn)
    return out


def effective_kernel_size(k, d):
    """Footprint of a k-tap kernel sampled every d positions: k + (k-1)(d-1)."""
    return k + (k - 1) * (d - 1)


@dataclass(frozen=True)
class ConvSpec:
    """Stride-1 convolution configuration. ``padding=None`` means "same"."""

    in_channels: int
    out_channels: int
    kernel: tuple
    dilation: tuple = (1, 1)
    groups: int = 1
    padding: tuple = None

    def __post_init__(self):
        kernel = tuple(int(k) for k in self.kernel)
        dilation = tuple(int(d) for d in self.dilation)
        if len(kernel) != 2 or min(kernel) < 1:
            raise ConfigError(f"kernel must be two positive sizes, got {self.kernel}")
        if len(dilation) != 2 or min(dilation) < 1:
            raise ConfigError(f"dilation must be >= (1, 1), got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ConfigError("channel counts and groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(f"groups={self.groups} must divide in_channels={self.in_channels} "
                              f"and out_channels={self.out_channels}")
        if self.padding is None:
            eff = (effective_kernel_size(kernel[0], dilation[0]),
                   effective_kernel_size(kernel[1], dilation[1]))
            if eff[0] % 2 == 0 or eff[1] % 2 == 0:
                raise ConfigError(f"'same' padding needs an odd effective kernel, got {eff}")
            padding = ((eff[0] - 1) // 2, (eff[1] - 1) // 2)
        else:
            padding = tuple(int(p) for p in self.padding)
            if len(padding) != 2 or min(padding) < 0:
                raise ConfigError(f"padding must be two non-negative sizes, got {self.padding}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "dilation", dilation)
        object.__setattr__(self, "padding", padding)

    @property
    def effective_kernel(self):
        return (effective_kernel_size(self.kernel[0], self.dilation[0]),
                effective_kernel_size(self.kernel[1], self.dilation[1]))

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    @property
    def num_params(self):
        c, cpg, kh, kw = self.weight_shape
        return c * cpg * kh * kw

    def output_hw(self, h, w):
        kh, kw = self.effective_kernel
        return h + 2 * self.padding[0] - kh + 1, w + 2 * self.padding[1] - kw + 1


def conv2d(x, weight, spec):
    """Bias-free dilated, grouped, zero-padded convolution (stride 1)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError("conv2d", f"input [N, {spec.in_channels}, H, W]", x.shape)
    if weight.shape != spec.weight_shape:
        raise DimensionError("conv2d", f"weight {spec.weight_shape}", weight.shape)
    if x.dtype != weight.dtype:
        raise DimensionError("conv2d", f"weight dtype {x.dtype}", weight.dtype)
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d", f"input large enough for kernel {spec.effective_kernel}",
                             x.shape)
    pad, dil, groups = spec.padding, spec.dilation, spec.groups
    y = kernels.conv2d_forward(x.data, weight.data, pad, dil, groups)

    def backward(g, needs):
        return kernels.conv2d_backward(x.data, weight.data, g, pad, dil, groups,
                                       need_input=needs[0], need_weight=needs[1])

    return _result(y, (x, weight), backward)


def linear(x, weight, bias):
    """out[n, g] = sum_f x[n, f] * weight[g, f] + bias[g]."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError("linear", f"input [N, {weight.shape[-1]}]", x.shape)
    if bias.shape != (weight.shape[0],):
        raise DimensionError("linear", f"bias ({weight.shape[0]},)", bias.shape)
    y = x.data @ weight.data.T
    y += bias.data

    def backward(g, needs):
        gx = g @ weight.data if needs[0] else None
        gw = g.T @ x.data if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _result(y, (x, weight, bias), backward)


def _check_bn(op, x, gamma, beta, running_mean, running_var, training):
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim != 4:
        raise DimensionError(op, "input [N, C, H, W]", x.shape)
    c = x.shape[1]
    for t in (gamma, beta):
        if t.shape != (c,):
            raise DimensionError(op, f"per-channel state of size {c}", t.shape)
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError(op, f"running stats of size {c}", running_mean.shape)
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise DimensionError(op, "N*H*W >= 2 in training mode", x.shape)
    return x, gamma, beta


def _update_running(x, running_mean, running_var, mean, var, momentum):
    m = x.shape[0] * x.shape[2] * x.shape[3]
    running_mean *= 1 - momentum
    running_mean += momentum * mean
    running_var *= 1 - momentum
    running_var += momentum * var * (m / (m - 1))


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays) are updated in place; the running variance
    is tracked with the unbiased estimator.
    """
    x, gamma, beta = _check_bn("batchnorm2d", x, gamma, beta, running_mean, running_var,
                               training)
    if training:
        y, xhat, mean, var, invstd = kernels.batchnorm_forward_train(x.data, gamma.data,
                                                                     beta.data, eps)
        _update_running(x, running_mean, running_var, mean, var, momentum)

        def backward(g, needs):
            gx, ggamma, gbeta = kernels.batchnorm_backward(g, xhat, gamma.data, invstd)
            return gx, ggamma, gbeta
    else:
        dt = x.dtype
        invstd = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
        scale = (gamma.data * invstd).astype(dt)
        shift = (beta.data - running_mean * gamma.data * invstd).astype(dt)
        y = x.data * scale[None, :, None, None] + shift[None, :, None, None]
        mean_b = running_mean.astype(dt)[None, :, None, None]
        invstd_b = invstd.astype(dt)[None, :, None, None]

        def backward(g, needs):
            gx = g * scale[None, :, None, None] if needs[0] else None
            ggamma = (g * ((x.data - mean_b) * invstd_b)).sum(axis=(0, 2, 3)) if needs[1] else None
            gbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
            return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), backward)


def prelu(x, alpha):
    """x where x >= 0, alpha * x elsewhere; alpha is a single learnable slope."""
    x, alpha = _wrap(x), _wrap(alpha)
    if alpha.size != 1:
        raise DimensionError("prelu", "a single slope", alpha.shape)
    a = alpha.data.reshape(-1)[0]
    y = kernels.prelu_forward(x.data, a)

    def backward(g, needs):
        gx, galpha = kernels.prelu_backward(x.data, a, g)
        return gx, np.full(alpha.shape, galpha, dtype=alpha.dtype)

    return _result(y, (x, alpha), backward)


def batchnorm_prelu(x, gamma, beta, alpha, running_mean, running_var, training,
                    momentum=0.1, eps=1e-5):
    """``prelu(batchnorm2d(x, ...), alpha)``.

    Training mode runs as one fused op that never materializes the normalized
    activations; eval mode simply chains the two ops.
    """
    if not training:
        return prelu(batchnorm2d(x, gamma, beta, running_mean, running_var, False,
                                 momentum, eps), alpha)
    x, gamma, beta = _check_bn("batchnorm_prelu", x, gamma, beta, running_mean, running_var,
                               training)
    alpha = _wrap(alpha)
    if alpha.size != 1:
        raise DimensionError("batchnorm_prelu", "a single slope", alpha.shape)
    a = alpha.data.reshape(-1)[0]
    y, mean, var, invstd = kernels.bn_prelu_forward_train(x.data, gamma.data, beta.data, a, eps)
    _update_running(x, running_mean, running_var, mean, var, momentum)

    def backward(g, needs):
        gx, ggamma, gbeta, galpha = kernels.bn_prelu_backward(g, x.data, gamma.data, beta.data,
                                                              a, mean, invstd)
        return gx, ggamma, gbeta, np.full(alpha.shape, galpha, dtype=alpha.dtype)

    return _result(y, (x, gamma, beta, alpha), backward)


def concat_channels(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError("concat_channels", f"[{a.shape[0]}, *, {a.shape[2:]}]", b.shape)
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)

    def backward(g, needs):
        return g[:, :ca], g[:, ca:]

    return _result(y, (a, b), backward)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)

    def backward(g, needs):
        return g, g

    return _result(a.data + b.data, (a, b), backward)


def reshape(x, shape):
    x = _wrap(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 1 for s in shape):
        raise DimensionError("reshape", f"{x.size} elements", shape)
    in_shape = x.shape

    def backward(g, needs):
        return (g.reshape(in_shape),)

    return _result(x.data.reshape(shape), (x,), backward)


def mse_loss(pred, target):
    """Mean over all elements of (pred - target)^2, as a scalar tensor."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise DimensionError("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    n = diff.size
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g, needs):
        gp = (2.0 * g / n) * diff
        return (gp if needs[0] else None), (-gp if needs[1] else None)

    return _result(loss, (pred, target), backward)
