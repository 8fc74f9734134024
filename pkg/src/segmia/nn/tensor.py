"""Float32 tensor helpers and the binary tensor container.

Container layout, all little-endian:

    magic   4 bytes  b"SLKT"
    version 1 byte   (currently 1)
    rank    1 byte
    extents rank * u32
    payload prod(extents) * f32, row-major
"""

import struct
from pathlib import Path

import numpy as np

from segmia.errors import NotFiniteError, ShapeError

MAGIC = b"SLKT"
VERSION = 1


def as_f32(values) -> np.ndarray:
    """Return ``values`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(values, dtype=np.float32)


def require_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NotFiniteError(f"{what} contains non-finite values")
    return arr


def save_tensor(path, arr) -> None:
    """Write a float32 tensor to ``path`` in the container format."""
    arr = as_f32(arr)
    require_finite(arr)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ShapeError(f"container supports rank 1..255, got {arr.ndim}")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_tensor(path) -> np.ndarray:
    """Read a tensor written by :func:`save_tensor`."""
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    version, rank = struct.unpack_from("<BB", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    offset = 6
    if len(raw) < offset + 4 * rank:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != offset + 4 * count:
        raise ValueError(
            f"{path}: payload size {len(raw) - offset} does not match shape {shape}"
        )
    arr = np.frombuffer(raw, dtype="<f4", offset=offset, count=count)
    arr = arr.reshape(shape).astype(np.float32)
    require_finite(arr, str(path))
    return arr
