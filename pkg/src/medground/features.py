"""Binary matrix files for region/token features and classifier weights.

Layout (little-endian throughout):

    bytes 0..7    magic  b"MGFEAT01"
    bytes 8..9    uint16 dtype code: 1 = float32, 2 = float64
    bytes 10..11  uint16 ndim, must be 2
    bytes 12..27  2 x uint64: rows, cols
    bytes 28..    row-major payload, rows*cols elements

The format is intentionally dumb: fixed header, no compression, no
alignment tricks, so any language can read it with a dozen lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FeatureFileError

MAGIC = b"MGFEAT01"
_HEADER = struct.Struct("<8sHHQQ")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def write_matrix(path, matrix: np.ndarray) -> None:
    """Write a 2-D float matrix; dtype is preserved (float32 or float64)."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FeatureFileError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.dtype not in _CODES:
        m = m.astype(np.float64)
    code = _CODES[m.dtype]
    header = _HEADER.pack(MAGIC, code, 2, m.shape[0], m.shape[1])
    payload = np.ascontiguousarray(m.astype(_DTYPES[code])).tobytes()
    Path(path).write_bytes(header + payload)


def read_matrix(path) -> np.ndarray:
    """Read a matrix file back; raises FeatureFileError on any defect."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFileError(f"{path}: {len(data)} bytes is shorter than the header")
    magic, code, ndim, rows, cols = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if code not in _DTYPES:
        raise FeatureFileError(f"{path}: unknown dtype code {code}")
    if ndim != 2:
        raise FeatureFileError(f"{path}: ndim {ndim} unsupported")
    dtype = _DTYPES[code]
    expected = _HEADER.size + rows * cols * dtype.itemsize
    if len(data) != expected:
        raise FeatureFileError(f"{path}: {len(data)} bytes, header declares {expected}")
    flat = np.frombuffer(data, dtype=dtype, offset=_HEADER.size)
    return flat.reshape(rows, cols).astype(dtype.newbyteorder("="))
