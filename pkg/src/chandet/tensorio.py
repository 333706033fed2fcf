"""Binary tensor file format used for channel maps and checkpoints.

Layout (little-endian throughout):

    magic   5 bytes  b"PTEN1"
    dtype   1 byte   0 = float32, 1 = float64, 2 = int32
    rank    1 byte
    shape   rank * uint64
    payload element-count * element-size bytes, row-major (C order)

The payload length is validated against the header on read; any mismatch
is rejected. Roundtrips are bit-exact for all three dtypes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTEN1"

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int32): 2,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    """Raised when a tensor file is malformed or uses an unsupported dtype."""


def tensor_to_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise TensorFormatError(
            f"unsupported dtype {arr.dtype}; expected float32, float64 or int32"
        )
    header = MAGIC + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if arr.dtype.byteorder == ">":  # force little-endian payload
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return header + arr.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 7 or blob[:5] != MAGIC:
        raise TensorFormatError("bad magic; not a PTEN1 tensor")
    code, rank = struct.unpack_from("<BB", blob, 5)
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    offset = 7
    if len(blob) < offset + 8 * rank:
        raise TensorFormatError("truncated shape header")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = count * dtype.itemsize
    if len(blob) - offset != expected:
        raise TensorFormatError(
            f"payload length {len(blob) - offset} does not match shape {shape} "
            f"({expected} bytes expected)"
        )
    flat = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=count, offset=offset)
    return flat.reshape(shape).astype(dtype, copy=True)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
