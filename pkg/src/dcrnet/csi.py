"""Angular-delay preprocessing and a synthetic block-sparse CSI generator.

A channel matrix ``H`` is ``Nc x Nt`` complex (subcarriers by antennas). The
2-D unitary DFT ``Fc @ H @ Ft`` moves it to the delay (rows) x angle
(columns) domain, where a handful of scattering clusters occupy a few blocks.
The first ``Na`` delay rows are kept, split into real and imaginary channels
and min-max normalized to [0, 1] for the network.

Dataset file layout (little-endian)::

    b"DCRD" | version u32 | Na u32 | Nt u32 | Nc u32 | min f64 | max f64
    | seed u64 | clusters_lo u32 | clusters_hi u32 | decay f64 | spread f64
    | onset f64 | split count u32
    | per split: tag u32 | tensor record (N x 2 x Na x Nt float32, normalized)
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .serialization import atomic_write, read_struct, read_tensor, write_struct, write_tensor

DATASET_MAGIC = b"DCRD"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")
# envelopes below this relative power are not generated at all
_ENVELOPE_FLOOR = 1e-8


def dft_transform(H):
    """Delay/angle representation ``Fc @ H @ Ft`` with unitary DFT matrices.

    Works on the last two axes, so a stack of matrices is transformed at once.
    """
    H = np.asarray(H)
    if H.ndim < 2:
        raise ConfigError(f"dft_transform: expected [..., Nc, Nt], got shape {H.shape}")
    return np.fft.fft2(H, axes=(-2, -1), norm="ortho")


def inverse_dft(Ht):
    Ht = np.asarray(Ht)
    if Ht.ndim < 2:
        raise ConfigError(f"inverse_dft: expected [..., Nc, Nt], got shape {Ht.shape}")
    return np.fft.ifft2(Ht, axes=(-2, -1), norm="ortho")


def truncate(Ht, na):
    """Keep the leading ``na`` delay rows."""
    Ht = np.asarray(Ht)
    nc = Ht.shape[-2]
    if not 1 <= na <= nc:
        raise ConfigError(f"truncate: Na={na} must be in [1, Nc={nc}]")
    return Ht[..., :na, :]


def zero_pad(Ha, nc):
    """Inverse of truncation's shape change: append zero delay rows up to ``nc``."""
    Ha = np.asarray(Ha)
    na = Ha.shape[-2]
    if nc < na:
        raise ConfigError(f"zero_pad: Nc={nc} is smaller than Na={na}")
    pad = [(0, 0)] * Ha.ndim
    pad[-2] = (0, nc - na)
    return np.pad(Ha, pad)


def to_real_view(Ha, dtype=np.float32):
    """[..., Na, Nt] complex -> [..., 2, Na, Nt] real (real part first)."""
    Ha = np.asarray(Ha)
    return np.stack([Ha.real, Ha.imag], axis=-3).astype(dtype, copy=False)


def from_real_view(x):
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ConfigError(f"from_real_view: expected [..., 2, Na, Nt], got shape {x.shape}")
    ctype = np.complex64 if x.dtype == np.float32 else np.complex128
    out = np.empty(x.shape[:-3] + x.shape[-2:], dtype=ctype)
    out.real = x[..., 0, :, :]
    out.imag = x[..., 1, :, :]
    return out


@dataclass
class AngularDelayMatrix:
    """Truncated angular-delay CSI ``Ha`` (complex Na x Nt)."""

    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def real_view(self):
        dtype = np.float32 if self.values.dtype == np.complex64 else np.float64
        return to_real_view(self.values, dtype)

    @classmethod
    def from_real(cls, x):
        return cls(from_real_view(x))


def energy_retained(Ht, na):
    """Fraction of the delay-domain energy inside the first ``na`` rows."""
    Ht = np.asarray(Ht)
    total = np.sum(np.abs(Ht) ** 2)
    if total == 0:
        return 1.0
    return float(np.sum(np.abs(truncate(Ht, na)) ** 2) / total)


def block_sparsity(Ha, rel=0.01):
    """Mean over samples of the fraction of entries below ``rel`` x sample max."""
    mag = np.abs(np.asarray(Ha))
    mag = mag.reshape(mag.shape[0] if mag.ndim > 2 else 1, -1)
    peak = mag.max(axis=1, keepdims=True)
    return float(np.mean(mag < rel * peak))


# -- synthetic channels -------------------------------------------------------

@dataclass(frozen=True)
class GeneratorParams:
    """Cluster model for the synthetic channel generator.

    Each cluster has one complex-Gaussian amplitude. It starts at a delay drawn
    uniformly from ``[0, onset * Na)``, its power decays as
    ``exp(-tap / decay)``, and its angular power footprint is a Gaussian of
    width ``spread`` DFT bins around a uniformly drawn center.
    """

    na: int = 32
    nt: int = 32
    nc: int = 1024
    clusters: tuple = (1, 3)
    decay: float = 2.0
    spread: float = 1.0
    onset: float = 0.25

    def __post_init__(self):
        lo, hi = (int(c) for c in self.clusters)
        object.__setattr__(self, "clusters", (lo, hi))
        if lo < 1 or hi < lo:
            raise ConfigError(f"cluster range {lo}..{hi} must satisfy 1 <= lo <= hi")
        if min(self.na, self.nt, self.nc) < 1 or self.na > self.nc:
            raise ConfigError(f"need 1 <= Na <= Nc and Nt >= 1, got "
                              f"Na={self.na} Nt={self.nt} Nc={self.nc}")
        for name in ("decay", "spread"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v}")
        if not 0 < self.onset <= 1:
            raise ConfigError(f"onset must be in (0, 1], got {self.onset}")


def sample_rng(seed, split_index, sample_index):
    """Independent stream per sample so results do not depend on batching."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(split_index,
                                                                          sample_index)))


def synth_angular_delay(rng, params):
    """One full ``Nc x Nt`` delay/angle matrix with unit Frobenius norm."""
    nc, nt = params.nc, params.nt
    Ht = np.zeros((nc, nt), dtype=np.complex128)
    bins = np.arange(nt)
    n_clusters = int(rng.integers(params.clusters[0], params.clusters[1] + 1))
    span = params.decay * math.log(1.0 / _ENVELOPE_FLOOR)
    for _ in range(n_clusters):
        tau0 = rng.uniform(0.0, params.onset * params.na)
        theta0 = rng.uniform(0.0, nt)
        g = rng.standard_normal(2)
        amp = (g[0] + 1j * g[1]) / math.sqrt(2)
        first = int(math.ceil(tau0))
        last = min(nc, int(math.floor(tau0 + span)) + 1)
        taps = np.arange(first, last)
        delay = np.exp(-(taps - tau0) / params.decay)
        # circular distance to the cluster center in DFT bins
        dq = (bins - theta0 + nt / 2) % nt - nt / 2
        angle = np.exp(-dq ** 2 / (2 * params.spread ** 2))
        Ht[first:last] += amp * np.sqrt(np.outer(delay, angle))
    norm = np.linalg.norm(Ht)
    if norm > 0:
        Ht /= norm
    return Ht


def synth_channel(rng, params):
    """Spatial-frequency channel ``H`` (Nc x Nt) from the cluster model."""
    return inverse_dft(synth_angular_delay(rng, params))


def _generate_raw(n_samples, params, seed, split_index):
    out = np.empty((n_samples, 2, params.na, params.nt), dtype=np.float64)
    for i in range(n_samples):
        H = synth_channel(sample_rng(seed, split_index, i), params)
        out[i] = to_real_view(truncate(dft_transform(H), params.na), np.float64)
    return out


# -- normalization and datasets ----------------------------------------------

@dataclass(frozen=True)
class NormMeta:
    lo: float
    hi: float


def fit_norm(*arrays):
    lo = min(float(np.min(a)) for a in arrays)
    hi = max(float(np.max(a)) for a in arrays)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise DataError("non-finite values in dataset")
    if hi <= lo:
        raise DataError(f"degenerate data: min == max == {lo}")
    return NormMeta(lo, hi)


def normalize(x, meta=None):
    """Global min-max map to [0, 1]. Returns ``(normalized float32, meta)``."""
    x = np.asarray(x, dtype=np.float64)
    meta = meta or fit_norm(x)
    y = (x - meta.lo) / (meta.hi - meta.lo)
    return y.astype(np.float32), meta


def denormalize(x, meta):
    return np.asarray(x, dtype=np.float64) * (meta.hi - meta.lo) + meta.lo


@dataclass
class Dataset:
    data: np.ndarray  # N x 2 x Na x Nt float32 in [0, 1]
    norm: NormMeta
    split: str = "train"
    seed: int = 0
    params: GeneratorParams = field(default_factory=GeneratorParams)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise DataError(f"dataset tensor must be [N, 2, Na, Nt], got {self.data.shape}")

    def __len__(self):
        return self.data.shape[0]

    @property
    def na(self):
        return self.data.shape[2]

    @property
    def nt(self):
        return self.data.shape[3]

    def denormalized(self):
        return denormalize(self.data, self.norm)

    def angular_delay(self):
        """Complex ``Ha`` for every sample."""
        return from_real_view(self.denormalized())


def synth_generate(n_samples, params=None, seed=0, split="train"):
    """Generate one normalized split using its own min/max."""
    return generate_splits({split: n_samples}, params, seed)[split]


def generate_splits(counts, params=None, seed=0):
    """Generate several splits sharing one min/max normalization.

    ``counts`` maps split name to sample count; each split draws from its own
    per-sample streams, so adding a split never changes another.
    """
    params = params or GeneratorParams()
    for name, n in counts.items():
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        if int(n) < 1:
            raise ConfigError(f"split {name!r} needs at least 1 sample, got {n}")
    raw = {name: _generate_raw(int(n), params, seed, SPLITS.index(name))
           for name, n in counts.items()}
    meta = fit_norm(*raw.values())
    return {name: Dataset(normalize(x, meta)[0], meta, name, seed, params)
            for name, x in raw.items()}


def write_datasets(f, splits):
    splits = list(splits.values()) if isinstance(splits, dict) else list(splits)
    if not splits:
        raise DataError("no splits to write")
    first = splits[0]
    for ds in splits[1:]:
        if ds.norm != first.norm or ds.params != first.params or ds.seed != first.seed:
            raise DataError("splits written together must share normalization and generator")
    p = first.params
    f.write(DATASET_MAGIC)
    write_struct(f, "IIII", DATASET_VERSION, first.na, first.nt, p.nc)
    write_struct(f, "dd", first.norm.lo, first.norm.hi)
    write_struct(f, "QII", first.seed, p.clusters[0], p.clusters[1])
    write_struct(f, "ddd", p.decay, p.spread, p.onset)
    write_struct(f, "I", len(splits))
    for ds in splits:
        write_struct(f, "I", SPLITS.index(ds.split))
        write_tensor(f, np.asarray(ds.data, dtype=np.float32))


def read_datasets(f):
    magic = f.read(4)
    if magic != DATASET_MAGIC:
        raise DataError(f"not a dataset file (magic {magic!r})")
    version, na, nt, nc = read_struct(f, "IIII")
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    lo, hi = read_struct(f, "dd")
    seed, c_lo, c_hi = read_struct(f, "QII")
    decay, spread, onset = read_struct(f, "ddd")
    (count,) = read_struct(f, "I")
    try:
        params = GeneratorParams(na, nt, nc, (c_lo, c_hi), decay, spread, onset)
    except ConfigError as e:
        raise DataError(f"corrupt dataset header: {e}") from None
    meta = NormMeta(lo, hi)
    out = {}
    for _ in range(count):
        (tag,) = read_struct(f, "I")
        if tag >= len(SPLITS):
            raise DataError(f"unknown split tag {tag}")
        data = read_tensor(f)
        if data.ndim != 4 or data.shape[1:] != (2, na, nt) or data.dtype != np.float32:
            raise DataError(f"split tensor has shape {data.shape} {data.dtype}, "
                            f"expected [N, 2, {na}, {nt}] float32")
        out[SPLITS[tag]] = Dataset(data, meta, SPLITS[tag], seed, params)
    return out


def save_datasets(path, splits):
    with atomic_write(path) as f:
        write_datasets(f, splits)


def load_datasets(path):
    try:
        with open(path, "rb") as f:
            return read_datasets(f)
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None


def generator_summary(params):
    d = asdict(params)
    d["clusters"] = list(params.clusters)
    return d
