"""Seeded random-stream derivation.

All randomness in the toolkit flows from one top-level integer seed. Every
consumer derives its own named substream, so parallel execution order can
never change results and any single stage can be reproduced in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Return a Generator for the substream identified by ``names``.

    Names may mix strings (stage names) and integers (indices). The mapping
    is stable across processes and platforms.
    """
    key = tuple(_name_key(n) if isinstance(n, str) else int(n) for n in names)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
