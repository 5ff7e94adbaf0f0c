"""Deterministic seed-substream helpers.

Every random draw in the package flows from one run seed through a named
substream, so toggling one consumer (generator, clicks, init, ...) never
perturbs the draws another consumer sees.  Keys are hashed with blake2b,
not Python's hash(), so results are independent of PYTHONHASHSEED.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _digest(parts: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


def substream(seed: int, *names) -> np.random.Generator:
    """Return a fresh Generator for the substream identified by ``names``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_digest((seed, *names)))))


def derive_seed(seed: int, *names) -> int:
    """Deterministic 64-bit child seed keyed by ``(seed, *names)``."""
    return _digest((seed, *names)) & _MASK64


def stable_unit(seed: int, *names) -> float:
    """Deterministic float in [0, 1) keyed by ``(seed, *names)``."""
    return (_digest((seed, *names)) & _MASK64) / 2.0**64


def stable_normal(seed: int, *names) -> float:
    """Deterministic standard-normal draw keyed by ``(seed, *names)``."""
    return float(substream(seed, *names).standard_normal())
