"""Keyed counter-based random streams.

Every stream is a Philox generator whose 128-bit key is derived from
``(seed, *indices)`` through :class:`numpy.random.SeedSequence`.  A draw
therefore depends only on its key, never on how many other streams were
consumed before it, which keeps sampling independent of evaluation order.
"""

import numpy as np

MASK64 = (1 << 64) - 1

# Stream domains, used as the first index so unrelated consumers never collide.
SAMPLE = 1
PATHS = 2
SHUFFLE = 3
INIT = 4
SPLIT = 5
EPOCH = 6


def stream_key(seed, *indices):
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64,
                                spawn_key=tuple(int(i) for i in indices))
    return ss.generate_state(2, dtype=np.uint64)


def substream(seed, *indices):
    """Generator for the substream keyed by ``(seed, *indices)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *indices)))


def keyed_permutation(n, seed, *indices):
    """Permutation of ``range(n)`` keyed by ``(seed, *indices)``.

    Each position gets a 64-bit sort key from its own substream-free hash,
    so ``keyed_permutation(n)`` restricted to the first ``m`` items orders
    them consistently with ``keyed_permutation(m)``.
    """
    keys = hash_indices(seed, *indices, np.arange(n, dtype=np.uint64))
    return np.argsort(keys, kind="stable")


def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(MASK64)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(MASK64)
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(MASK64)
    return x ^ (x >> np.uint64(31))


def hash_indices(seed, *indices):
    """Vectorised 64-bit hash of ``(seed, *indices)``; the last index may be an array."""
    with np.errstate(over="ignore"):
        h = _splitmix64(np.uint64(int(seed) & MASK64))
        for idx in indices:
            idx = np.asarray(idx).astype(np.uint64)
            h = _splitmix64(h ^ idx)
    return h
