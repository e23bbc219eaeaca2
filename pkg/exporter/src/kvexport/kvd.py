"""Standalone KVD1 writer, bit-exact with the core library's container grammar.

The exporter talks to the analysis library only through this wire format:

    magic "KVD1" | version u32 | entry_count u32 |
    per entry: name_len u32 | name utf-8 | dtype u8 (1 = f32) | ndim u8 |
               dims u64 x ndim | payload f32 little-endian row-major
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"KVD1"
VERSION = 1
DTYPE_F32 = 1


def encode_kvd(entries) -> bytes:
    """Serialize an ordered mapping of name -> float32 ndarray."""
    items = list(entries.items()) if hasattr(entries, "items") else list(entries)
    seen = set()
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        if name in seen:
            raise ValueError(f"duplicate entry name {name!r}")
        seen.add(name)
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise ValueError(f"entry {name!r} must be float32, got {a.dtype}")
        if a.ndim > 0:
            a = np.ascontiguousarray(a)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)
