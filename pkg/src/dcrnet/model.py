"""DCRNet: dilated-convolution autoencoder for angular-delay CSI matrices.

Encoder: 5x5 head conv -> one encoder block -> flatten -> FC to the codeword.
Decoder: FC back to 2*Na*Nt -> reshape -> 5x5 head conv -> two decoder blocks.
Every convolution is bias-free, "same"-padded and followed by batch norm and
PReLU; blocks end in a 1x1 fusion conv plus an identity shortcut.
"""

import enum
import io
import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .autodiff import (
    ConvSpec,
    Parameter,
    Tensor,
    add,
    batchnorm2d,
    batchnorm_prelu,
    concat_channels,
    conv2d,
    linear,
    prelu,
    reshape,
)
from .errors import ConfigError, DataError, DimensionError
from .serialization import (
    atomic_write,
    read_struct,
    read_tensor,
    write_struct,
    write_tensor,
)

PRELU_INIT = 0.25
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Ablation(enum.Enum):
    FULL = "full"
    M1 = "m1"  # dilated encoder, undilated decoder
    BASELINE = "baseline"  # no dilation anywhere

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown ablation {value!r}; choose full, m1 or baseline") from None


_ABLATION_TAGS = {Ablation.FULL: 0, Ablation.M1: 1, Ablation.BASELINE: 2}


def parse_eta(value):
    """Accept ``1/4``, ``0.25`` or a Fraction; returns a Fraction."""
    try:
        eta = Fraction(value).limit_denominator(1 << 20) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError, TypeError):
        raise ConfigError(f"cannot parse compression rate {value!r}") from None
    return eta


@dataclass(frozen=True)
class DcrNetConfig:
    na: int = 32
    nt: int = 32
    eta: Fraction = Fraction(1, 4)
    rho: int = 1
    ablation: Ablation = Ablation.FULL
    decoder_groups: int = 0  # 0 = depthwise (groups == channel count)

    def __post_init__(self):
        object.__setattr__(self, "eta", parse_eta(self.eta))
        object.__setattr__(self, "ablation", Ablation.parse(self.ablation))
        if self.na < 1 or self.nt < 1:
            raise ConfigError(f"matrix dimensions must be positive, got {self.na}x{self.nt}")
        if not 0 < self.eta < 1:
            raise ConfigError(f"compression rate must lie in (0, 1), got {self.eta}")
        if isinstance(self.rho, float) and not self.rho.is_integer():
            raise ConfigError(f"width expansion rate must be an integer, got {self.rho}")
        object.__setattr__(self, "rho", int(self.rho))
        if self.rho < 1:
            raise ConfigError(f"width expansion rate must be >= 1, got {self.rho}")
        if self.decoder_groups < 0 or (self.decoder_groups
                                       and self.width % self.decoder_groups):
            raise ConfigError(f"decoder_groups={self.decoder_groups} must divide width {self.width}")
        if self.codeword_len < 1:
            raise ConfigError(f"codeword length floor(2*{self.na}*{self.nt}*{self.eta}) is < 1")

    @property
    def features(self):
        return 2 * self.na * self.nt

    @property
    def codeword_len(self):
        return math.floor(self.features * self.eta)

    @property
    def width(self):
        """Internal channel width of the decoder blocks (8 * rho)."""
        return 8 * self.rho

    @property
    def groups(self):
        return self.decoder_groups or self.width

    @property
    def encoder_dilations(self):
        return (1, 1, 1) if self.ablation is Ablation.BASELINE else (1, 2, 3)

    @property
    def decoder_dilated(self):
        return self.ablation is Ablation.FULL

    def to_text(self):
        lines = [f"na={self.na}", f"nt={self.nt}", f"eta={self.eta}", f"rho={self.rho}",
                 f"ablation={self.ablation.value}"]
        if self.decoder_groups:
            lines.append(f"groups={self.decoder_groups}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        keys = {"na": "na", "nt": "nt", "eta": "eta", "rho": "rho", "ablation": "ablation",
                "groups": "decoder_groups"}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip().lower(), value.strip()
            if not sep or key not in keys:
                raise ConfigError(f"config line {lineno}: expected key=value with key in "
                                  f"{sorted(keys)}, got {line!r}")
            field = keys[key]
            if field in ("na", "nt", "rho", "decoder_groups"):
                try:
                    kwargs[field] = int(value)
                except ValueError:
                    raise ConfigError(f"config line {lineno}: {key} must be an integer") from None
            else:
                kwargs[field] = value
        return cls(**kwargs)


def load_config(path):
    with open(path) as f:
        return DcrNetConfig.from_text(f.read())


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for name, buf in mod.buffers().items():
                yield f"{mod_name}.{name}", buf

    def buffers(self):
        return {}

    def train(self, mode=True):
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x):
        return self.forward(x)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


class Conv2d(Module):
    def __init__(self, spec, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.weight = Parameter(np.zeros(spec.weight_shape), "weight", dtype=dtype)

    def forward(self, x):
        return conv2d(x, self.weight, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.gamma = Parameter(np.ones(channels), "gamma", dtype=dtype)
        self.beta = Parameter(np.zeros(channels), "beta", dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, BN_MOMENTUM, BN_EPS)


class PReLU(Module):
    def __init__(self, init=PRELU_INIT, dtype=np.float32):
        super().__init__()
        self.alpha = Parameter(np.full(1, init), "alpha", dtype=dtype)

    def forward(self, x):
        return prelu(x, self.alpha)


class Linear(Module):
    def __init__(self, in_features, out_features, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features)), "weight", dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), "bias", dtype=dtype)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    def __init__(self, cin, cout, kernel, dilation=1, groups=1, dtype=np.float32):
        super().__init__()
        spec = ConvSpec(cin, cout, kernel, (dilation, dilation), groups)
        self.conv = Conv2d(spec, dtype)
        self.bn = BatchNorm2d(cout, dtype)
        self.act = PReLU(dtype=dtype)

    @property
    def spec(self):
        return self.conv.spec

    def forward(self, x):
        bn = self.bn
        return batchnorm_prelu(self.conv(x), bn.gamma, bn.beta, self.act.alpha, bn.running_mean,
                               bn.running_var, self.training, BN_MOMENTUM, BN_EPS)


class _ResidualBlock(Module):
    """Two parallel branches, channel concat, 1x1 fusion, identity shortcut."""

    branch_names = ()

    def branches(self):
        return [getattr(self, name) for name in self.branch_names]

    def forward(self, x):
        a, b = (branch(x) for branch in self.branches())
        return add(self.fuse(concat_channels(a, b)), x)


class EncoderBlock(_ResidualBlock):
    branch_names = ("dilated", "standard")

    def __init__(self, dilations=(1, 2, 3), dtype=np.float32):
        super().__init__()
        convs = []
        for d in dilations:
            convs.append(ConvBNAct(2, 2, (1, 3), d, dtype=dtype))
            convs.append(ConvBNAct(2, 2, (3, 1), d, dtype=dtype))
        self.dilated = Sequential(*convs)
        self.standard = Sequential(ConvBNAct(2, 2, (3, 3), dtype=dtype))
        self.fuse = ConvBNAct(4, 2, (1, 1), dtype=dtype)


class DecoderBlock(_ResidualBlock):
    branch_names = ("branch1", "branch2")

    def __init__(self, width, groups, dilated=True, dtype=np.float32):
        super().__init__()
        d2, d3 = (2, 3) if dilated else (1, 1)
        self.branch1 = Sequential(
            ConvBNAct(2, width, (3, 3), d2, dtype=dtype),
            ConvBNAct(width, width, (3, 1), d3, groups, dtype=dtype),
            ConvBNAct(width, width, (1, 3), d3, groups, dtype=dtype),
            ConvBNAct(width, 2, (3, 3), dtype=dtype),
        )
        self.branch2 = Sequential(
            ConvBNAct(2, width, (1, 3), dtype=dtype),
            ConvBNAct(width, width, (5, 1), 1, groups, dtype=dtype),
            ConvBNAct(width, width, (1, 5), 1, groups, dtype=dtype),
            ConvBNAct(width, 2, (3, 1), dtype=dtype),
        )
        self.fuse = ConvBNAct(4, 2, (1, 1), dtype=dtype)


class Encoder(Module):
    def __init__(self, config, dtype=np.float32):
        super().__init__()
        self.config = config
        self.head = ConvBNAct(2, 2, (5, 5), dtype=dtype)
        self.block = EncoderBlock(config.encoder_dilations, dtype)
        self.fc = Linear(config.features, config.codeword_len, dtype)

    def forward(self, x):
        h = self.block(self.head(x))
        return self.fc(reshape(h, (h.shape[0], self.config.features)))


class Decoder(Module):
    def __init__(self, config, dtype=np.float32):
        super().__init__()
        self.config = config
        self.fc = Linear(config.codeword_len, config.features, dtype)
        self.head = ConvBNAct(2, 2, (5, 5), dtype=dtype)
        self.blocks = Sequential(
            DecoderBlock(config.width, config.groups, config.decoder_dilated, dtype),
            DecoderBlock(config.width, config.groups, config.decoder_dilated, dtype),
        )

    def forward(self, v):
        c = self.config
        h = reshape(self.fc(v), (v.shape[0], 2, c.na, c.nt))
        return self.blocks(self.head(h))


class DcrNet(Module):
    def __init__(self, config, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "config", config)
        self.encoder = Encoder(config, dtype)
        self.decoder = Decoder(config, dtype)
        for name, p in self.named_parameters():
            p.name = name

    @property
    def dtype(self):
        return self.encoder.fc.weight.dtype

    def encode(self, ha):
        ha = ha if isinstance(ha, Tensor) else Tensor(ha, dtype=self.dtype)
        c = self.config
        if ha.ndim != 4 or ha.shape[1:] != (2, c.na, c.nt):
            raise DimensionError("encode", f"[N, 2, {c.na}, {c.nt}]", ha.shape)
        return self.encoder(ha)

    def decode(self, v):
        v = v if isinstance(v, Tensor) else Tensor(v, dtype=self.dtype)
        if v.ndim != 2 or v.shape[1] != self.config.codeword_len:
            raise DimensionError("decode", f"[N, {self.config.codeword_len}]", v.shape)
        return self.decoder(v)

    def forward(self, ha):
        return self.decode(self.encode(ha))

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DataError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != value.shape:
                raise DataError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def astype(self, dtype):
        """Independent copy of the model (weights, BN statistics, mode) at ``dtype``."""
        clone = DcrNet(self.config, dtype)
        clone.load_state_dict(self.state_dict())
        clone.train(self.training)
        return clone

    def parameter_vector(self):
        return np.concatenate([p.data.ravel() for p in self.parameters()])


def kaiming_normal(rng, shape, fan_in, slope=PRELU_INIT):
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)


def build(config, rng_seed=0, dtype=np.float32):
    """Instantiate DCRNet with Kaiming (fan-in, PReLU gain) weights.

    BN starts at gamma=1, beta=0; PReLU slopes at 0.25; FC biases at zero.
    """
    if not isinstance(config, DcrNetConfig):
        raise ConfigError("build() needs a DcrNetConfig")
    model = DcrNet(config, dtype)
    rng = np.random.default_rng(rng_seed)
    for _, mod in model.named_modules():
        if isinstance(mod, Conv2d):
            c, cpg, kh, kw = mod.spec.weight_shape
            mod.weight.data[...] = kaiming_normal(rng, mod.weight.shape, cpg * kh * kw)
        elif isinstance(mod, Linear):
            mod.weight.data[...] = kaiming_normal(rng, mod.weight.shape, mod.in_features)
    return model


def encode(model, ha):
    return model.encode(ha)


def decode(model, v):
    return model.decode(v)


# ---------------------------------------------------------------------------
# structure introspection


@dataclass(frozen=True)
class LayerInfo:
    """One entry of :func:`enumerate_layers`.

    ``stage`` names the enclosing unit (``encoder.head``, ``decoder.blocks.0``
    ...); ``branch`` is the parallel branch inside a block, ``"fuse"`` for the
    fusion conv, or None outside blocks. ``channels`` is the feature count a
    BN / PReLU / residual add operates on.
    """

    name: str
    kind: str  # conv | bn | prelu | fc | add
    stage: str
    branch: str = None
    spec: ConvSpec = None
    in_features: int = 0
    out_features: int = 0
    channels: int = 0


def _conv_rows(prefix, unit, stage, branch):
    c = unit.spec.out_channels
    return [
        LayerInfo(f"{prefix}.conv", "conv", stage, branch, spec=unit.spec),
        LayerInfo(f"{prefix}.bn", "bn", stage, branch, channels=c),
        LayerInfo(f"{prefix}.act", "prelu", stage, branch, channels=c),
    ]


def _block_rows(prefix, block):
    rows = []
    for bname in block.branch_names:
        for i, unit in enumerate(getattr(block, bname)):
            rows += _conv_rows(f"{prefix}.{bname}.{i}", unit, prefix, bname)
    rows += _conv_rows(f"{prefix}.fuse", block.fuse, prefix, "fuse")
    rows.append(LayerInfo(f"{prefix}.residual", "add", prefix, "fuse", channels=2))
    return rows


def enumerate_layers(model):
    """Layers in forward execution order."""
    enc, dec = model.encoder, model.decoder
    rows = _conv_rows("encoder.head", enc.head, "encoder.head", None)
    rows += _block_rows("encoder.block", enc.block)
    rows.append(LayerInfo("encoder.fc", "fc", "encoder.fc", in_features=enc.fc.in_features,
                          out_features=enc.fc.out_features))
    rows.append(LayerInfo("decoder.fc", "fc", "decoder.fc", in_features=dec.fc.in_features,
                          out_features=dec.fc.out_features))
    rows += _conv_rows("decoder.head", dec.head, "decoder.head", None)
    for i, block in enumerate(dec.blocks):
        rows += _block_rows(f"decoder.blocks.{i}", block)
    return rows


def compose_rf(specs, start=(1, 1)):
    """Stride-1 receptive-field composition r <- r + (k' - 1) per layer."""
    rh, rw = start
    for spec in specs:
        kh, kw = spec.effective_kernel
        rh, rw = rh + kh - 1, rw + kw - 1
    return rh, rw


def _block_rf(block, start=(1, 1)):
    ends = [compose_rf([u.spec for u in branch], start) for branch in block.branches()]
    merged = (max(e[0] for e in ends), max(e[1] for e in ends))
    out = compose_rf([block.fuse.spec], merged)
    return max(out[0], start[0]), max(out[1], start[1])


def receptive_field(model, part="encoder", include_head=True):
    """Analytic receptive field of a convolutional part of the model.

    ``part`` is one of ``encoder``, ``decoder`` (conv stacks, head optional),
    ``encoder_block``, ``encoder_dilated`` (the dilated branch alone) or
    ``decoder_block``.
    """
    enc, dec = model.encoder, model.decoder
    if part == "encoder_dilated":
        return compose_rf([u.spec for u in enc.block.dilated])
    if part == "encoder_block":
        return _block_rf(enc.block)
    if part == "decoder_block":
        return _block_rf(dec.blocks._modules["0"])
    if part == "encoder":
        r = compose_rf([enc.head.spec]) if include_head else (1, 1)
        return _block_rf(enc.block, r)
    if part == "decoder":
        r = compose_rf([dec.head.spec]) if include_head else (1, 1)
        for block in dec.blocks:
            r = _block_rf(block, r)
        return r
    raise ConfigError(f"unknown model part {part!r}")


# ---------------------------------------------------------------------------
# checkpoints
#
# b"DCRC" | version u32 | na u32 | nt u32 | eta num u32 | eta den u32 | rho u32
# | ablation tag u32 | decoder_groups u32 | record count u32
# then per record: name length u32 | utf-8 name | tensor record

CKPT_MAGIC = b"DCRC"
CKPT_VERSION = 1


def write_checkpoint(f, model):
    c = model.config
    state = model.state_dict()
    f.write(CKPT_MAGIC)
    write_struct(f, "IIIIIIIII", CKPT_VERSION, c.na, c.nt, c.eta.numerator, c.eta.denominator,
                 c.rho, _ABLATION_TAGS[c.ablation], c.decoder_groups, len(state))
    for name, value in state.items():
        raw = name.encode("utf-8")
        write_struct(f, "I", len(raw))
        f.write(raw)
        write_tensor(f, value)


def read_checkpoint(f):
    magic = f.read(4)
    if magic != CKPT_MAGIC:
        raise DataError(f"not a DCRNet checkpoint (magic {magic!r})")
    version, na, nt, num, den, rho, tag, groups, count = read_struct(f, "IIIIIIIII")
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    ablation = {v: k for k, v in _ABLATION_TAGS.items()}.get(tag)
    if ablation is None:
        raise DataError(f"unknown ablation tag {tag}")
    config = DcrNetConfig(na, nt, Fraction(num, den), rho, ablation, groups)
    state = {}
    for _ in range(count):
        (n,) = read_struct(f, "I")
        name = f.read(n).decode("utf-8")
        state[name] = read_tensor(f)
    dtype = state["encoder.fc.weight"].dtype if "encoder.fc.weight" in state else np.float32
    model = DcrNet(config, dtype)
    model.load_state_dict(state)
    model.eval()
    return model


def save_checkpoint(model, path):
    with atomic_write(path) as f:
        write_checkpoint(f, model)


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            return read_checkpoint(f)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def checkpoint_bytes(model):
    buf = io.BytesIO()
    write_checkpoint(buf, model)
    return buf.getvalue()


def with_ablation(config, ablation):
    return replace(config, ablation=Ablation.parse(ablation))
