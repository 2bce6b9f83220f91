"""Seeded random streams, one per purpose.

Every consumer asks for ``stream(seed, purpose, *extra)`` and receives an
independent PCG64 generator. PCG64 output is identical across platforms, and
keying by purpose means adding draws to one stage never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = (
    "init",
    "data",
    "split",
    "partner",
    "mask",
    "label",
    "batch",
    "mia",
)


def _purpose_key(purpose: str) -> int:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}")
    return zlib.crc32(purpose.encode("ascii"))


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, *extra)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed), _purpose_key(purpose), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
