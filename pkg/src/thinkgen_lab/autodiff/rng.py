"""Addressable random streams.

Every stochastic draw in the package goes through ``stream(seed, *path)``:
the path (strings/ints) is hashed together with the run seed into a 128-bit
Philox key, so the same address always yields the same numbers and distinct
addresses are independent. Reusing an address is how a rollout group shares
its latent noise.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *path) -> int:
    text = repr((int(seed),) + tuple(str(p) for p in path)).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=16).digest(), "little")


def stream(seed: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


class Streams:
    """A seed plus a path prefix; ``child`` splits off a sub-address."""

    def __init__(self, seed: int, *prefix):
        self.seed = int(seed)
        self.prefix = tuple(prefix)

    def child(self, *path) -> "Streams":
        return Streams(self.seed, *self.prefix, *path)

    def get(self, *path) -> np.random.Generator:
        return stream(self.seed, *self.prefix, *path)

    def __repr__(self) -> str:
        return f"Streams({self.seed}, {'/'.join(map(str, self.prefix))})"
