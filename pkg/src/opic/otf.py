"""OTF tensor container: a tiny binary format for float arrays.

Layout, all little-endian:

    bytes 0..3   magic "OTF1"
    byte  4      dtype code (0 = float32, 1 = float64)
    byte  5      ndim
    next 8*ndim  dims, unsigned 64-bit
    rest         payload, row-major

Round-trips are bit-exact, which the dataset/checkpoint determinism
guarantees rely on.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OTF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_otf(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"OTF stores float32/float64 only, got {array.dtype}")
    payload = np.ascontiguousarray(array).astype(_DTYPES[code], copy=False)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", code, array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(payload.tobytes())


def read_otf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 6)
    offset = 6 + 8 * ndim
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = offset + n * _DTYPES[code].itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: payload length {len(raw) - offset}, expected {expected - offset}")
    out = np.frombuffer(raw, dtype=_DTYPES[code], count=n, offset=offset).reshape(dims)
    return out.astype(out.dtype.newbyteorder("="), copy=True)
