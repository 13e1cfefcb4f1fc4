"""Deterministic seed streams.

Every random draw in the package flows from one master seed. Sub-seeds are
derived with a splitmix64 step per key so that independent components
(scenario i, agent j, training batch k, ...) get decorrelated streams and
partial reruns reproduce exactly.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def derive_seed(master: int, *keys) -> int:
    """Derive a 64-bit sub-seed from a master seed and a key path.

    Keys may be ints or strings; strings are hashed with FNV-1a (never
    Python's randomized hash) so results are stable across processes.
    """
    z = master & _MASK
    for key in keys:
        if isinstance(key, str):
            key = _fnv1a64(key.encode("utf-8"))
        elif isinstance(key, (bool, np.bool_)):
            key = int(key)
        elif isinstance(key, (int, np.integer)):
            key = int(key) & _MASK
        else:
            raise TypeError(f"seed keys must be int or str, got {type(key)!r}")
        z = _splitmix64(z ^ key)
    return z


def rng_for(master: int, *keys) -> np.random.Generator:
    """PCG64 generator for the given key path."""
    return np.random.default_rng(derive_seed(master, *keys))
