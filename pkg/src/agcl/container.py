"""Bit-exact tensor container.

One tensor per record: magic ``AGT1``, a little-endian header (dtype code,
rank, extents) and the raw row-major payload. Dtype codes: 1 = float32,
2 = float64, 3 = uint8. The format is deliberately dumb so any language
can read it back byte for byte.
"""

from __future__ import annotations

import struct
import zlib
from io import BufferedReader, BytesIO

import numpy as np

from .errors import CorruptionError, StructuralError

MAGIC = b"AGT1"

_DTYPE_CODES = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.uint8): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Serialize one array (header + payload)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise StructuralError(f"unsupported tensor dtype {arr.dtype}")
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    head = MAGIC + struct.pack("<II", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload


def write_tensor(path, arr: np.ndarray) -> int:
    """Write one tensor file; returns the crc32 of the full record."""
    blob = tensor_bytes(arr)
    with open(path, "wb") as fh:
        fh.write(blob)
    return zlib.crc32(blob)


def _read_exact(fh: BufferedReader, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptionError(f"{path}: truncated while reading {what}")
    return data


def read_tensor_stream(fh: BufferedReader, path="<stream>") -> np.ndarray:
    magic = _read_exact(fh, 4, path, "magic")
    if magic != MAGIC:
        raise CorruptionError(f"{path}: bad magic {magic!r}")
    code, rank = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise CorruptionError(f"{path}: unknown dtype code {code}")
    if rank > 8:
        raise CorruptionError(f"{path}: implausible rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, path, "extents"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize, path, "payload")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return np.ascontiguousarray(arr.reshape(shape))


def read_tensor(path, expected_crc32: int | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if expected_crc32 is not None:
        actual = zlib.crc32(blob)
        if actual != expected_crc32:
            raise CorruptionError(
                f"{path}: checksum mismatch ({actual} != {expected_crc32})"
            )
    stream = BytesIO(blob)
    arr = read_tensor_stream(stream, path)
    if stream.read(1):
        raise CorruptionError(f"{path}: trailing bytes after payload")
    return arr
