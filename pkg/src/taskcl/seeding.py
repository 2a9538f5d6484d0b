"""Stable seed derivation.

Every random stream in the package is derived from one root seed by hashing
``(root, *purpose)``, so serial and parallel consumers see identical streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 63) - 1


def derive_seed(root: int, *purpose: object) -> int:
    """Return a 63-bit seed that depends only on ``root`` and ``purpose``."""
    h = hashlib.sha256(str(int(root)).encode())
    for p in purpose:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK


def rng_for(root: int, *purpose: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *purpose))
