"""Little-endian binary tensor files and named-tensor archives.

Tensor: magic ``STPN``, version u32, rank u32, extents u64[rank], payload
f64[] row-major. Archive: u32 count then (u32 name length, UTF-8 name,
tensor) records.
"""
import io
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"STPN"
VERSION = 1


def _read(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated input: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(f, x):
    x = np.asarray(x, dtype="<f8")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, x.ndim))
    f.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    f.write(x.tobytes(order="C"))


def read_tensor(f):
    magic = _read(f, 4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read(f, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def tensor_to_bytes(x):
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(io.BytesIO(data))


def write_archive(path, tensors):
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(tensors)))
        for name, x in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_tensor(f, x)


def read_archive(path):
    out = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read(f, 4))
        for _ in range(count):
            (n,) = struct.unpack("<I", _read(f, 4))
            name = _read(f, n).decode("utf-8")
            out[name] = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after archive")
    return out
