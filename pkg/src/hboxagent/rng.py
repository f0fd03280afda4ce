"""Keyed, counter-based random streams.

Every random draw in the package comes from a stream addressed by a tuple of
keys (master seed, purpose tag, case id, ...), so results never depend on the
order in which work is scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*keys: object) -> int:
    """Hash an ordered key tuple into a 64-bit integer."""
    h = hashlib.blake2b(digest_size=8)
    for key in keys:
        h.update(repr(key).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & _MASK64


def stream(*keys: object) -> np.random.Generator:
    """Philox generator keyed by ``keys``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(*keys)))
