"""Binary container of named arrays.

Layout (all integers little-endian):

    magic      8 bytes  b"CPPFCKPT"
    version    u32      currently 1
    meta_len   u32      length of a UTF-8 key=value metadata block
    meta       bytes
    count      u32      number of arrays
    per array:
        name_len u16, name (UTF-8)
        ndim     u32, dims u32 * ndim
        data     float64 little-endian, C order
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CPPFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    meta_blob = "\n".join(f"{k}={v}" for k, v in (meta or {}).items()).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        meta_text = blob[pos : pos + meta_len].decode("utf-8")
        pos += meta_len
        meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return arrays, meta
