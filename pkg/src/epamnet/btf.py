"""Binary tensor file (.btf) reader and writer.

Layout: ``b"BTF1"``, one dtype byte (0 float32, 1 float64), one ndim byte,
``ndim`` little-endian uint32 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"BTF1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float64:
        code = 1
    else:
        code = 0
    dt = _CODES[code]
    if array.ndim > 255:
        raise ValueError("at most 255 axes")
    header = MAGIC + struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dt).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise ParseError("not a BTF1 blob (bad magic)")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _CODES:
        raise ParseError(f"unknown BTF dtype code {code}")
    off = 6 + 4 * ndim
    if len(blob) < off:
        raise ParseError("truncated BTF header")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    dt = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(blob) - off != expected:
        raise ParseError(f"BTF payload has {len(blob) - off} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(blob, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
