"""Versioned binary container for named arrays.

Layout (all integers little-endian)::

    magic      4 bytes  b"CQNR"
    version    u32
    count      u32
    count x record:
        name_len  u32
        name      UTF-8 bytes
        dtype     u8   (0=float32, 1=float64, 2=int64, 3=uint8)
        rank      u32
        extents   rank x u64
        values    raw little-endian values, C order

Used for model checkpoints and for feature files.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"CQNR"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class ContainerError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> tuple[int, np.ndarray]:
    kind, size = arr.dtype.kind, arr.dtype.itemsize
    if kind == "f" and size == 4:
        return 0, arr.astype("<f4", copy=False)
    if kind == "f" and size == 8:
        return 1, arr.astype("<f8", copy=False)
    if kind in "iu" and not (kind == "u" and size == 1):
        return 2, arr.astype("<i8", copy=False)
    if kind == "u" and size == 1:
        return 3, arr
    if kind == "b":
        return 3, arr.astype("u1")
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def write_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if not arr.flags.c_contiguous:
                arr = arr.copy(order="C")
            code, arr = _dtype_code(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def _read_exact(fh: BinaryIO, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"{path}: truncated file")
    return buf


def read_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ContainerError(f"{path}: bad magic, not a container file")
        version, count = struct.unpack("<II", _read_exact(fh, 8, path))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, nlen, path).decode("utf-8")
            code, rank = struct.unpack("<BI", _read_exact(fh, 5, path))
            if code not in _DTYPES:
                raise ContainerError(f"{path}: unknown dtype code {code} for {name!r}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, path))
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(_read_exact(fh, nbytes, path), dtype=dtype).reshape(shape)
            out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        if fh.read(1):
            raise ContainerError(f"{path}: trailing bytes after {count} records")
    return out
