"""Chained 64-bit prefix keys over 4-token group hashes.

A group hash only identifies four tokens; KV for a block is reusable only
with its whole prefix, so cache keys are chained::

    key(0) = mix(seed, g0)
    key(i) = mix(key(i-1), g_i)

``mix(h, g) = fmix(h ^ fmix(g + GOLDEN))`` where ``fmix`` is the SplitMix64
finalizer. ``fmix`` is a bijection on 64-bit words, so for a fixed ``h``
distinct groups give distinct keys and vice versa.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from kvtrace.trace.types import PrefixKey

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
DEFAULT_SEED = 0x6B76247472616365  # "kv$trace"


def fmix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix(h: int, g: int) -> int:
    return fmix64(h ^ fmix64(g + GOLDEN))


def chain_keys(groups: Sequence[int], seed: int = DEFAULT_SEED) -> list[int]:
    """Chained key values, one per group."""
    out = []
    h = seed & MASK64
    for g in groups:
        h = mix(h, g)
        out.append(h)
    return out


def prefix_keys(groups: Sequence[int], seed: int = DEFAULT_SEED) -> list[PrefixKey]:
    return [PrefixKey(v, i) for i, v in enumerate(chain_keys(groups, seed))]


_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_U1, _U2, _UG = np.uint64(_M1), np.uint64(_M2), np.uint64(GOLDEN)


def _fmix_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _U1
    z = (z ^ (z >> _S27)) * _U2
    return z ^ (z >> _S31)


def chain_keys_flat(groups: np.ndarray, lengths: np.ndarray, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Vectorized :func:`chain_keys` over many concatenated sequences.

    ``groups`` is the flat uint64 concatenation of all sequences and
    ``lengths`` their sizes. Returns the flat chained keys. Work is done
    position by position across all sequences still long enough, so the cost
    is O(total groups) array work plus O(max length) Python steps.
    """
    groups = np.asarray(groups, dtype=np.uint64)
    lengths = np.asarray(lengths, dtype=np.int64)
    keys = np.empty_like(groups)
    if groups.size == 0:
        return keys
    starts = np.zeros(len(lengths), dtype=np.int64)
    np.cumsum(lengths[:-1], out=starts[1:])
    order = np.argsort(-lengths, kind="stable")
    sorted_starts = starts[order]
    sorted_lens = lengths[order]
    # active[i] = number of sequences with length > i (lengths sorted descending)
    max_len = int(sorted_lens[0])
    active = np.searchsorted(-sorted_lens, -np.arange(max_len), side="left")
    with np.errstate(over="ignore"):
        hashed = _fmix_np(groups + _UG)
        n = int(active[0])
        idx = sorted_starts[:n]
        keys[idx] = _fmix_np(np.uint64(seed & MASK64) ^ hashed[idx])
        for i in range(1, max_len):
            n = int(active[i])
            idx = sorted_starts[:n] + i
            keys[idx] = _fmix_np(keys[idx - 1] ^ hashed[idx])
    return keys
