"""64-bit FNV-1a content digest.

The loop is compiled with numba in ``nogil`` mode so that concurrent ingest
clients can hash chunk payloads without serializing on the interpreter lock.
"""

from __future__ import annotations

import numba
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(nogil=True, cache=True)
def _fnv1a64(buf):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for i in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[i])) * prime
    return h


def fnv1a64(data) -> int:
    """Return the FNV-1a hash of ``data`` (bytes-like or uint8 array)."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a64(buf))


def fnv1a64_reference(data: bytes) -> int:
    """Pure-Python FNV-1a, kept as an independent check of the compiled path."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h
