"""Little-endian binary tensor records and atomic file output.

Tensor record layout::

    b"DCRT" | version u32 | rank u32 | dims u64[rank] | dtype tag u32 | raw data

dtype tag 1 = float32, 2 = float64; data is row-major, little-endian.
"""

import os
import struct
import tempfile
from contextlib import contextmanager

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"DCRT"
TENSOR_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_struct(f, fmt):
    fmt = "<" + fmt
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def write_struct(f, fmt, *values):
    f.write(struct.pack("<" + fmt, *values))


def write_tensor(f, array):
    array = np.asarray(array)
    tag = _DTYPE_TAGS.get(array.dtype)
    if tag is None:
        raise DataError(f"cannot serialize dtype {array.dtype}")
    f.write(TENSOR_MAGIC)
    write_struct(f, "II", TENSOR_VERSION, array.ndim)
    if array.ndim:
        write_struct(f, f"{array.ndim}Q", *array.shape)
    write_struct(f, "I", tag)
    f.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def read_tensor(f):
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    version, rank = read_struct(f, "II")
    if version != TENSOR_VERSION:
        raise DataError(f"unsupported tensor format version {version}")
    dims = read_struct(f, f"{rank}Q") if rank else ()
    (tag,) = read_struct(f, "I")
    dtype = _TAG_DTYPES.get(tag)
    if dtype is None:
        raise DataError(f"unknown dtype tag {tag}")
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(f, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)


def save_tensor(path, array):
    with atomic_write(path) as f:
        write_tensor(f, array)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temp file next to ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
