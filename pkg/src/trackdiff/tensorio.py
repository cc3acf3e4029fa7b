"""Flat binary container for named float64 tensors.

Layout (all integers little-endian)::

    magic      4 bytes   b"TDTN"
    version    uint32    1
    count      uint32    number of tensors
    count x {
        name_len  uint32, name  utf-8 bytes
        ndim      uint32, dims  ndim x uint64
    }
    payload    concatenated C-order float64 ('<f8') data, in table order

Round trips are bit-exact, including NaN payloads and signed zeros.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

__all__ = ["MAGIC", "VERSION", "write_tensors", "read_tensors", "dumps", "loads"]

MAGIC = b"TDTN"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    arrays = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        arrays.append(arr)
    for arr in arrays:
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    pos = 12
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * n
        if end > len(view):
            raise ValueError(f"truncated payload for tensor {name!r}")
        out[name] = np.frombuffer(view[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(view):
        raise ValueError(f"{len(view) - pos} trailing bytes after payload")
    return out


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def read_tensors(path) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
