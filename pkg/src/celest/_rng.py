"""Deterministic seeding helpers.

Every random stream in the package is derived from a root seed plus a tuple of
keys, so that adding a new consumer never shifts the draws of another one.
"""

from __future__ import annotations

import zlib

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a hash."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _key_to_int(key: object) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"negative seed key {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(seed: int, *keys: object) -> list[int]:
    """Entropy list for ``np.random.default_rng`` built from a seed and keys."""
    return [_key_to_int(seed), *(_key_to_int(k) for k in keys)]


def derive_rng(seed: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
