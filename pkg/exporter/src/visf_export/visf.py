"""Writer/reader for the VISF tensor container consumed by the encoding toolkit.

Layout (little-endian): magic "VISF", u32 version=1, u8 dtype code
(1=float32, 2=uint8, 3=float64), u32 ndim, ndim x u64 dims, then the tightly
packed row-major payload.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VISF"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("float64"): 3}


def write_visf(array: np.ndarray, path) -> None:
    array = np.ascontiguousarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype}")
    if array.size == 0:
        raise ValueError("refusing to write an empty tensor")
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack("<B", code)
    header += struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_visf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dtype = _DTYPES[raw[8]]
    (ndim,) = struct.unpack_from("<I", raw, 9)
    shape = struct.unpack_from(f"<{ndim}Q", raw, 13)
    offset = 13 + 8 * ndim
    count = math.prod(shape)
    if len(raw) - offset != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
