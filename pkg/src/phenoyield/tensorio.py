"""The ``PYT1`` tensor file format.

Layout (all little-endian)::

    b"PYT1" | rank: u32 | dims: rank x u32 | payload: prod(dims) x float32
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"PYT1"


class FormatError(ValueError):
    """A file does not match the expected on-disk layout."""


def write_tensor_to(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", array.ndim))
    if array.ndim:
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor_from(fh: BinaryIO, source: str = "<stream>") -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError(f"{source}: truncated header")
    (rank,) = struct.unpack("<I", head)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError(f"{source}: truncated dims")
    dims = struct.unpack(f"<{rank}I", raw) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"{source}: payload has {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def encode_tensor(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor_to(buf, array)
    return buf.getvalue()


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor_to(fh, array)


def read_tensor(path: str | Path, expected_shape: tuple[int, ...] | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: missing tensor file")
    with open(path, "rb") as fh:
        arr = read_tensor_from(fh, str(path))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    if expected_shape is not None and tuple(arr.shape) != tuple(expected_shape):
        raise FormatError(f"{path}: dims {tuple(arr.shape)} do not match manifest {tuple(expected_shape)}")
    return arr
