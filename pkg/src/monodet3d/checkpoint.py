"""Versioned binary checkpoints: named float64 arrays.

Layout (little endian): magic "MDTR", u32 format version, u32 array
count, then per array: u16 name length, name bytes (utf-8), u32 rank,
u32 extents, u64 payload byte length, raw float64 data. Insertion order
is preserved so files are byte-reproducible.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MDTR"
VERSION = 1


def save_checkpoint(path, arrays: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, value in arrays.items():
            arr = np.ascontiguousarray(value, dtype=np.float64)
            blob = arr.tobytes()
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    pos = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).copy()
        pos += nbytes
        out[name] = arr.reshape(shape)
    return out
