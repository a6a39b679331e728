"""Seed splitting.

Every component of a run draws from its own Philox (counter-based, 4x64-10)
generator. Its 64-bit key is ``splitmix64(splitmix64(seed) + stream)`` with
the stream index taken from :data:`STREAMS`.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
RNG_ALGORITHM = "philox4x64-10/splitmix64(splitmix64(seed)+stream)"

STREAMS = {
    "env": 0,
    "mask": 1,
    "init": 2,
    "policy": 3,
    "bootstrap": 4,
    "eval": 5,
    "dropout": 6,
    "minibatch": 7,
    "theory": 8,
}


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def stream_key(seed: int, stream: int | str) -> int:
    idx = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return splitmix64((splitmix64(int(seed) & MASK64) + idx) & MASK64)


def generator(seed: int, stream: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, stream)))


def subseed(seed: int, stream: int | str) -> int:
    """A 63-bit integer seed derived from a stream key, for APIs that want ints."""
    return stream_key(seed, stream) >> 1
