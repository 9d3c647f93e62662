"""Deterministic RNG derivation.

All randomness in the package flows through numpy Generators built from
SeedSequence keys. String components are hashed with crc32 so a purpose
label ("corpora", "fusion", ...) can join integer seeds in one key without
colliding with plain counters.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_parts(parts) -> tuple[int, ...]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode("utf-8")))
        elif isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFF)
        else:
            raise TypeError(f"seed key component must be int or str, got {type(p).__name__}")
    return tuple(out)


def rng_for(*parts) -> np.random.Generator:
    """Generator keyed by an (int | str)* tuple. Same key, same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_key_parts(parts))))


def derive_seed(*parts) -> int:
    """Stable 63-bit integer seed derived from the key tuple."""
    state = np.random.SeedSequence(_key_parts(parts)).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)
