"""64-bit FNV-1a digests.

Not a cryptographic hash. It is used for content addressing and corruption
checks at desk scale, where accidental collisions are the only concern.
"""

from __future__ import annotations

import numba
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a_kernel(buf, h):
    prime = np.uint64(FNV_PRIME)
    for i in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[i])) * prime
    return h


def fnv1a64(data: bytes | bytearray | memoryview | str, seed: int = FNV_OFFSET) -> int:
    """FNV-1a over ``data``; strings are hashed as UTF-8.

    ``seed`` continues a previous digest, so ``fnv1a64(b, fnv1a64(a)) == fnv1a64(a + b)``.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size == 0:
        return seed
    return int(_fnv1a_kernel(buf, np.uint64(seed)))


def hex64(value: int) -> str:
    return f"{value:016x}"
