"""Deterministic seed derivation so every component draws from its own stream."""
import hashlib

import numpy as np


def derive(seed: int, *tags) -> int:
    """Stable 63-bit child seed from a parent seed and a tag path."""
    text = repr((int(seed),) + tuple(tags)).encode()
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *tags))
