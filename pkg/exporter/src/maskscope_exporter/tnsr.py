"""Writer for the TNSR tensor container consumed by the analysis side.

Layout, all integers little-endian regardless of host:

    bytes 0..3    magic ``TNSR``
    bytes 4..5    format version, u16 (currently 1)
    byte  6       dtype code, u8: 1=f32, 2=u8, 3=u16, 4=i32
    byte  7       ndim, u8 (1..4)
    next 4*ndim   shape entries, u32, each >= 1
    rest          row-major element payload

This module only writes; the analysis package owns the validating
reader. Output is byte-for-byte deterministic for equal arrays.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
MAX_NDIM = 4

_DTYPE_CODES = {
    np.dtype(np.float32): 1,
    np.dtype(np.uint8): 2,
    np.dtype(np.uint16): 3,
    np.dtype(np.int32): 4,
}
_WIRE_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("u1"),
    3: np.dtype("<u2"),
    4: np.dtype("<i4"),
}


def write_array(array: np.ndarray, path: Path | str) -> int:
    """Write one array as a TNSR file; returns the byte count."""
    arr = np.asarray(array)
    if not 1 <= arr.ndim <= MAX_NDIM:
        raise ValueError(f"tensor rank must be 1..{MAX_NDIM}, got {arr.ndim}")
    if any(dim < 1 for dim in arr.shape):
        raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
    code = _DTYPE_CODES.get(np.dtype(arr.dtype.newbyteorder("=")))
    if code is None:
        raise ValueError(f"unsupported tensor dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=_WIRE_DTYPES[code])
    if code == 1 and not np.isfinite(arr).all():
        raise ValueError("f32 tensor contains non-finite values")
    header = struct.pack("<4sHBB", MAGIC, VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as sink:
        sink.write(header)
        sink.write(payload)
    return len(header) + len(payload)
