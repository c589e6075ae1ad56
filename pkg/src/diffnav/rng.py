"""Deterministic named RNG substreams.

All randomness in the package flows from one integer seed through named
substreams, so that independent pieces of work (per scenario, per
iteration, per episode) draw from disjoint, order-independent streams.
Keys may be strings or integers; strings are hashed with SHA-256 so the
derivation is stable across platforms and Python processes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *keys) -> np.random.Generator:
    """Return a Generator for the substream named by ``keys`` under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def spawn_seed(seed: int, *keys) -> int:
    """Derive a child integer seed (for handing to code that wants an int)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
