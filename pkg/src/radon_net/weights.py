"""RDNW weight container: a flat, ordered name -> float32 array file.

Layout (little-endian)::

    b"RDNW" | u32 version=1 | u32 count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=f32) | u8 rank
                | rank x u32 dims | row-major f32 payload
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"RDNW"
VERSION = 1
DTYPE_F32 = 0


class WeightFormatError(ValueError):
    pass


WeightContainer = Dict[str, np.ndarray]


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightFormatError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim > 0xFF:
            raise WeightFormatError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"truncated file while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise WeightFormatError("bad magic: not an RDNW weight file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightFormatError(f"unsupported RDNW version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
        try:
            name = bytes(take(name_len, f"name of tensor {i}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"tensor {i} name is not valid utf-8") from exc
        dtype, rank = struct.unpack("<BB", take(2, f"dtype of {name}"))
        if dtype != DTYPE_F32:
            raise WeightFormatError(f"tensor {name}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n, f"payload of {name}")
        if name in out:
            raise WeightFormatError(f"duplicate tensor name {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save_container(tensors: Mapping[str, np.ndarray], path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)
    return path


def load_container(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())
