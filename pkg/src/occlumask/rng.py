"""Named, splittable random streams.

Every random draw in the package comes from a stream derived from a tuple of
keys.  Integer keys are used as-is (reduced to 64 bits); string keys are first
hashed with :func:`hash64`.  The key tuple is fed to numpy's ``SeedSequence``
and the resulting state drives a ``PCG64`` generator, so a stream depends only
on its keys and never on how many other streams were created before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def hash64(key: str | bytes) -> int:
    """Stable 64-bit hash (BLAKE2b, 8-byte digest, little endian)."""
    if isinstance(key, str):
        key = key.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _entropy(key: int | str | bytes) -> int:
    if isinstance(key, (str, bytes)):
        return hash64(key)
    return int(key) & MASK64


def derive_seed(*keys: int | str | bytes) -> int:
    """Collapse a key tuple to a single 64-bit seed."""
    ss = np.random.SeedSequence([_entropy(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(*keys: int | str | bytes) -> np.random.Generator:
    """Return an independent generator for the given key tuple."""
    if not keys:
        raise ValueError("stream() needs at least one key")
    ss = np.random.SeedSequence([_entropy(k) for k in keys])
    return np.random.Generator(np.random.PCG64(ss))
