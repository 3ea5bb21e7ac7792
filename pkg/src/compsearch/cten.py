"""Binary tensor files ("CTEN") and the multi-tensor TOC container.

Single tensor record:
    magic ``CTEN`` | u8 version=1 | u8 dtype (0 = float32) | u8 ndim |
    ndim x u32 little-endian extents | row-major little-endian payload.

TOC container (used for checkpoints):
    u32 entry count, then per entry u16 name length + name bytes (utf-8) +
    u64 absolute file offset of a CTEN record, then the records themselves.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTEN"
VERSION = 1
DTYPE_F32 = 0

MAX_NDIM = 4


class CtenError(ValueError):
    """Raised on malformed CTEN bytes or unsupported tensors."""


def _check_array(arr: np.ndarray) -> np.ndarray:
    if arr.ndim > MAX_NDIM:
        raise CtenError(f"tensor has {arr.ndim} axes, limit is {MAX_NDIM}")
    # ascontiguousarray promotes 0-d to 1-d; reshape restores the shape
    return np.ascontiguousarray(arr, dtype="<f4").reshape(np.shape(arr))


def write_tensor(fh: io.BufferedIOBase, arr: np.ndarray) -> None:
    """Write one tensor record to an open binary stream."""
    arr = _check_array(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: io.BufferedIOBase) -> np.ndarray:
    """Read one tensor record from an open binary stream."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise CtenError(f"bad magic {magic!r}")
    header = fh.read(3)
    if len(header) != 3:
        raise CtenError("truncated header")
    version, dtype, ndim = struct.unpack("<BBB", header)
    if version != VERSION:
        raise CtenError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise CtenError(f"unsupported dtype code {dtype}")
    if ndim > MAX_NDIM:
        raise CtenError(f"ndim {ndim} exceeds limit {MAX_NDIM}")
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise CtenError("truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_toc(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a named-tensor container. Entry order follows dict order."""
    names = list(tensors)
    arrays = [_check_array(tensors[n]) for n in names]
    toc_size = 4 + sum(2 + len(n.encode("utf-8")) + 8 for n in names)
    offsets = []
    pos = toc_size
    for arr in arrays:
        offsets.append(pos)
        pos += 4 + 3 + 4 * arr.ndim + 4 * arr.size
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(names)))
        for name, off in zip(names, offsets):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", off))
        for arr in arrays:
            write_tensor(fh, arr)


def load_toc(path: str | Path) -> dict[str, np.ndarray]:
    """Read a named-tensor container into a dict (TOC order preserved)."""
    with open(path, "rb") as fh:
        raw_count = fh.read(4)
        if len(raw_count) != 4:
            raise CtenError("truncated TOC")
        (count,) = struct.unpack("<I", raw_count)
        entries = []
        seen: set[str] = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (offset,) = struct.unpack("<Q", fh.read(8))
            if name in seen:
                raise CtenError(f"duplicate tensor name {name!r}")
            seen.add(name)
            entries.append((name, offset))
        out: dict[str, np.ndarray] = {}
        for name, offset in entries:
            fh.seek(offset)
            out[name] = read_tensor(fh)
    return out
