"""Flat binary container for model parameters.

Layout (all integers little-endian)::

    8 bytes   magic  b"SLPSTG\\x00\\x01"
    u32       format version
    u32       n = length of the config descriptor
    n bytes   config descriptor, UTF-8 JSON with sorted keys
    u32       number of tensors
    per tensor: u16 name length, name (UTF-8), u8 ndim, ndim x u64 dims
    payload:  every tensor as float64 little-endian, in table order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"SLPSTG\x00\x01"
VERSION = 1


def dumps(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    desc = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise DataError("not a model checkpoint (bad magic)")
    pos = 8
    version, n = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    config = json.loads(blob[pos : pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    table = []
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * size > len(blob):
            raise DataError(f"checkpoint truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(blob):
        raise DataError("trailing bytes after checkpoint payload")
    return config, tensors


def save(path: str | os.PathLike, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, tensors))


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
