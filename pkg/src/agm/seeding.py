"""Deterministic seed derivation for independent random streams.

Every stochastic component (net init, sampler, per-image augmentation, ...)
draws from its own stream derived from the run seed and a string key, so
adding or removing one component never perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np

_U64 = 2**64


def derive_seed(base: int, *parts: int | str) -> int:
    """Derive a 64-bit seed from a base seed and a key path.

    Deterministic across platforms and processes. String parts are hashed
    with crc32 so the spawn key stays integral.
    """
    key = tuple(
        zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p) % _U64
        for p in parts
    )
    ss = np.random.SeedSequence(int(base) % _U64, spawn_key=key)
    state = ss.generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def rng_for(base: int, *parts: int | str) -> np.random.Generator:
    """A numpy Generator seeded from a derived stream."""
    return np.random.default_rng(derive_seed(base, *parts))
