"""Counter-based random streams.

Every consumer derives an independent Philox stream from (seed, path), where
the path is a short tuple of small non-negative integers (a purpose tag plus
indices).  Streams are stable: adding new consumers never perturbs existing
ones, which keeps surgery and pruning byte-reproducible across versions.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_PATH_BITS = 21  # three path components fit one 64-bit word


def stream(seed: int, *path: int) -> np.random.Generator:
    if len(path) > 3:
        raise ValueError("path supports at most three components")
    tag = 0
    for part in path:
        if part < 0 or part >= (1 << _PATH_BITS):
            raise ValueError(f"path component {part} out of range")
        tag = (tag << _PATH_BITS) | part
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, tag]))
