"""Binary checkpoint container for named parameter arrays.

Layout (all integers little-endian)::

    magic       8 bytes   b"SCNNCKPT"
    version     u32       FORMAT_VERSION
    meta_len    u32       length of the UTF-8 JSON metadata blob
    meta        bytes     JSON object (variant name, dtype, training info)
    count       u32       number of parameter records
    record * count:
        name_len  u32
        name      UTF-8 bytes
        dtype     u8      1 = float32, 2 = float64
        rank      u32
        extents   u64 * rank
        data      raw little-endian scalars, C order
"""
import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"SCNNCKPT"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, arrays, metadata=None):
    """Write ``arrays`` (name -> ndarray, order preserved) to ``path``."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.dtype.newbyteorder("<")
            if le not in _DTYPE_CODES:
                raise TypeError(f"cannot store dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", _DTYPE_CODES[le], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, field):
        if self.pos + n > len(self.buf):
            raise ParseError(f"checkpoint truncated while reading {field}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, field):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def load_checkpoint(path):
    """Return ``(arrays, metadata)`` read from a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(8, "magic") != MAGIC:
        raise ParseError(f"{path}: bad magic, not a SCNNCKPT file")
    version, meta_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: metadata is not valid JSON") from exc
    (count,) = r.unpack("<I", "record count")
    arrays = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"record {i} name length")
        name = r.take(name_len, f"record {i} name").decode("utf-8")
        code, rank = r.unpack("<BI", f"{name} dtype/rank")
        if code not in _CODE_DTYPES:
            raise ParseError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{rank}Q", f"{name} extents")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes, f"{name} data"), dtype=dtype)
        arrays[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.buf):
        raise ParseError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return arrays, metadata
