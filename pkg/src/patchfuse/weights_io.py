"""Binary weight files (PFW1).

Layout, all integers little-endian: magic ``PFW1``, version u16, tensor count
u32, then per tensor: name length u16, UTF-8 name, rank u8, dims as u32s,
data as little-endian f64 in row-major order. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PFW1"
VERSION = 1


def save_weights(path, tensors):
    """Write a name -> array mapping; insertion order is preserved on disk."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(tensors)))
        for name, value in tensors.items():
            # tobytes() below always emits row-major bytes; no layout fixup
            # here because ascontiguousarray would promote rank-0 to rank-1
            arr = np.asarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path):
    """Read a PFW1 file back into an ordered name -> float64 array mapping."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a PFW1 weight file (magic {blob[:4]!r})")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported PFW1 version {version}")
    offset = 10
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        out[name] = data.reshape(dims).astype(np.float64)
    return out
