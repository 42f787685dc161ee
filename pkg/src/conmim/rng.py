"""Seed derivation for named random streams.

Every consumer gets its own generator seeded from ``splitmix64(seed ^ tag)``
so that adding draws in one place never shifts another stream.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1

STREAMS = ("init", "data", "labels", "mask", "augment", "probe", "order", "codebook", "gradcheck")


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_tag(name: str) -> int:
    h = zlib.crc32(name.encode("utf-8"))
    return splitmix64(h)


def derive_seed(seed: int, stream: str, *index: int) -> int:
    s = splitmix64((int(seed) & MASK64) ^ stream_tag(stream))
    for i in index:
        s = splitmix64(s ^ (int(i) & MASK64))
    return s


def generator(seed: int, stream: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, stream, *index)))
