"""Deterministic, splittable random streams.

Every consumer derives its own counter-based Philox stream from a root seed
plus a string path (usually a parameter name), so adding or removing one
consumer never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int, *path: str) -> np.random.Generator:
    """Philox generator keyed by (seed, '/'-joined path)."""
    tag = f"{seed}/" + "/".join(path)
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal draws truncated to two standard deviations, then scaled."""
    out = rng.standard_normal(shape)
    for _ in range(100):
        mask = np.abs(out) > 2.0
        n = int(mask.sum())
        if n == 0:
            break
        out[mask] = rng.standard_normal(n)
    else:
        out = np.clip(out, -2.0, 2.0)
    return (out * std).astype(dtype)
