"""Counter-based deterministic random numbers for parallel-safe sampling.

Decisions such as DARE's per-element keep/drop must not depend on chunking
or worker schedule, so instead of a stateful generator each draw is a pure
function of (key, counter): a splitmix64-style avalanche over the counter
xored with a key derived from the seed, the source position and the tensor
name. Any chunking of the counter range reproduces the same stream.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


_U64 = (1 << 64) - 1


def mix64(x):
    """splitmix64 finalizer; bijective avalanche on uint64 (wrap intended)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _U64
    return h


def derive_key(seed: int, source_index: int, tensor_name: str) -> np.uint64:
    k = int(mix64((seed & _U64) ^ fnv1a64(tensor_name)))
    k ^= (source_index * 0x9E3779B97F4A7C15) & _U64
    return np.uint64(int(mix64(k & _U64)))


def uniform01(key: np.uint64, counters: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) doubles indexed by counter; pure and order-free."""
    h = mix64(counters.astype(np.uint64) ^ key)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def keep_mask(key: np.uint64, start: int, count: int, drop_prob: float) -> np.ndarray:
    """Bernoulli(1 - drop_prob) keep decisions for counters [start, start+count)."""
    counters = np.arange(start, start + count, dtype=np.uint64)
    return uniform01(key, counters) >= drop_prob
