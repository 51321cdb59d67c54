"""Mergeable probabilistic structures used by the engine.

All structures consume 128-bit key hashes as ``(hi, lo)`` uint64 arrays. The
keys are already uniformly distributed digests, so per-row / per-probe
positions are derived by remixing them with seeded finalizers rather than by
hashing again from scratch.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .hashing import _CHUNK, derive_seed, digest_ids, fmix64, join128, split128
from .model import key_bytes


class ConfigurationError(ValueError):
    pass


def _as_arrays(hi, lo) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(hi, dtype=np.uint64).ravel(), np.asarray(lo, dtype=np.uint64).ravel()


def _split_keys(keys: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [split128(int(k)) for k in keys]
    if not pairs:
        return np.zeros(0, np.uint64), np.zeros(0, np.uint64)
    hi, lo = zip(*pairs)
    return np.array(hi, np.uint64), np.array(lo, np.uint64)


class CountMinSketch:
    """Count-Min Sketch over 128-bit keys.

    ``estimate`` never undercounts. Sketches built with the same
    ``(width, depth, seed)`` merge by element-wise addition, so one sketch
    per partition followed by :meth:`merge` equals a single pass over the
    whole stream. Counters are int64; saturation would need 2**63
    increments of one cell.
    """

    def __init__(self, width: int = 1 << 20, depth: int = 5, seed: int = 0):
        if width < 1 or depth < 1:
            raise ConfigurationError(f"width and depth must be positive, got {width}, {depth}")
        self.width = int(width)
        self.depth = int(depth)
        self.seed = int(seed)
        self.row_seeds = np.array([derive_seed(self.seed, r) for r in range(self.depth)], dtype=np.uint64)
        self.table = np.zeros((self.depth, self.width), dtype=np.int64)

    def _positions(self, row: int, hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
        out = np.empty(len(hi), np.intp)
        pow2 = self.width & (self.width - 1) == 0
        for s in range(0, len(hi), _CHUNK):
            sl = slice(s, s + _CHUNK)
            mixed = fmix64(lo[sl] ^ self.row_seeds[row])
            mixed ^= hi[sl]
            if pow2:
                mixed &= np.uint64(self.width - 1)
            else:
                mixed %= np.uint64(self.width)
            out[sl] = mixed
        return out

    def add(self, hi, lo) -> "CountMinSketch":
        """Increment once per element of ``(hi, lo)``; returns ``self``."""
        hi, lo = _as_arrays(hi, lo)
        if len(hi):
            for r in range(self.depth):
                self.table[r] += np.bincount(self._positions(r, hi, lo), minlength=self.width)
        return self

    def estimate(self, hi, lo) -> np.ndarray:
        hi, lo = _as_arrays(hi, lo)
        out = None
        for r in range(self.depth):
            row = self.table[r, self._positions(r, hi, lo)]
            out = row if out is None else np.minimum(out, row)
        return out

    def increment(self, key: int) -> "CountMinSketch":
        hi, lo = split128(key)
        return self.add([hi], [lo])

    def estimate_key(self, key: int) -> int:
        hi, lo = split128(key)
        return int(self.estimate([hi], [lo])[0])

    def compatible(self, other: "CountMinSketch") -> bool:
        return (
            self.width == other.width
            and self.depth == other.depth
            and np.array_equal(self.row_seeds, other.row_seeds)
        )

    def merge(self, other: "CountMinSketch") -> "CountMinSketch":
        """New sketch whose counters are the element-wise sum of both inputs."""
        if not self.compatible(other):
            raise ConfigurationError(
                f"cannot merge sketches of shape ({self.depth}, {self.width}) seed {self.seed} "
                f"and ({other.depth}, {other.width}) seed {other.seed}"
            )
        out = CountMinSketch.__new__(CountMinSketch)
        out.width, out.depth, out.seed = self.width, self.depth, self.seed
        out.row_seeds = self.row_seeds
        out.table = self.table + other.table
        return out

    def merge_into(self, other: "CountMinSketch") -> "CountMinSketch":
        """In-place variant of :meth:`merge` used by the engine's reduce step."""
        if not self.compatible(other):
            raise ConfigurationError("cannot merge sketches with different dimensions or seeds")
        self.table += other.table
        return self

    def __eq__(self, other):
        if not isinstance(other, CountMinSketch):
            return NotImplemented
        return self.compatible(other) and np.array_equal(self.table, other.table)

    def __repr__(self):
        return f"CountMinSketch(width={self.width}, depth={self.depth}, seed={self.seed})"


def bloom_size(capacity: int, target_fpr: float) -> tuple[int, int]:
    """Bit count ``m`` and probe count ``k`` for ``capacity`` keys at ``target_fpr``."""
    if capacity <= 0:
        raise ValueError(f"capacity must be positive, got {capacity}")
    if not 0 < target_fpr < 1:
        raise ValueError(f"target_fpr must be in (0, 1), got {target_fpr}")
    m = max(8, math.ceil(-capacity * math.log(target_fpr) / math.log(2) ** 2))
    k = max(1, round(m / capacity * math.log(2)))
    return m, k


class BloomFilter:
    """Bloom filter over 128-bit keys, sized from ``(capacity, target_fpr)``.

    Probe ``i`` of a key lands on bit ``(h1 + i * h2) mod m`` (double hashing,
    ``h2`` forced odd).
    """

    def __init__(self, capacity: int, target_fpr: float = 1e-8, seed: int = 0):
        self.capacity = int(capacity)
        self.target_fpr = float(target_fpr)
        self.num_bits, self.num_hashes = bloom_size(self.capacity, self.target_fpr)
        self.bits = np.zeros((self.num_bits + 7) // 8, dtype=np.uint8)
        self._s1 = np.uint64(derive_seed(seed, 1001))
        self._s2 = np.uint64(derive_seed(seed, 1002))
        self.count = 0

    def _probe_base(self, hi, lo) -> tuple[np.ndarray, np.ndarray]:
        m = np.uint64(self.num_bits)
        h1 = fmix64(lo ^ self._s1) % m
        h2 = (fmix64(hi ^ self._s2) | np.uint64(1)) % m
        return h1, h2

    def _probe(self, h1, h2, i: int) -> np.ndarray:
        # h1, h2 < m < 2**63, so h1 + i*h2 mod m is computed without wrap-around
        m = np.uint64(self.num_bits)
        return ((h1 + (np.uint64(i) * h2) % m) % m).astype(np.intp)

    def add(self, hi, lo) -> "BloomFilter":
        hi, lo = _as_arrays(hi, lo)
        if not len(hi):
            return self
        h1, h2 = self._probe_base(hi, lo)
        for i in range(self.num_hashes):
            pos = self._probe(h1, h2, i)
            np.bitwise_or.at(self.bits, pos >> 3, (1 << (pos & 7)).astype(np.uint8))
        self.count += len(hi)
        return self

    def contains(self, hi, lo) -> np.ndarray:
        hi, lo = _as_arrays(hi, lo)
        result = np.zeros(len(hi), dtype=bool)
        alive = np.arange(len(hi))
        if not len(hi):
            return result
        h1, h2 = self._probe_base(hi, lo)
        for i in range(self.num_hashes):
            pos = self._probe(h1[alive], h2[alive], i)
            hit = (self.bits[pos >> 3] >> (pos & 7).astype(np.uint8)) & 1
            alive = alive[hit.astype(bool)]
            if not len(alive):
                return result
        result[alive] = True
        return result

    def add_key(self, key: int) -> "BloomFilter":
        hi, lo = split128(key)
        return self.add([hi], [lo])

    def __contains__(self, key: int) -> bool:
        hi, lo = split128(key)
        return bool(self.contains([hi], [lo])[0])

    def __repr__(self):
        return f"BloomFilter(capacity={self.capacity}, target_fpr={self.target_fpr}, bits={self.num_bits}, hashes={self.num_hashes})"


class ExactKeySet:
    """Drop-in replacement for :class:`BloomFilter` with no false positives."""

    def __init__(self, capacity: int = 0, target_fpr: float = 0.0, seed: int = 0):
        self.capacity = capacity
        self._chunks: list[np.ndarray] = []
        self._sorted: np.ndarray | None = np.zeros(0, dtype="S16")
        self.count = 0

    def add(self, hi, lo) -> "ExactKeySet":
        hi, lo = _as_arrays(hi, lo)
        self._chunks.append(key_bytes(hi, lo))
        self._sorted = None
        self.count += len(hi)
        return self

    def _table(self) -> np.ndarray:
        if self._sorted is None:
            self._sorted = np.unique(np.concatenate(self._chunks)) if self._chunks else np.zeros(0, "S16")
        return self._sorted

    def contains(self, hi, lo) -> np.ndarray:
        hi, lo = _as_arrays(hi, lo)
        return np.isin(key_bytes(hi, lo), self._table())

    def add_key(self, key: int) -> "ExactKeySet":
        hi, lo = split128(key)
        return self.add([hi], [lo])

    def __contains__(self, key: int) -> bool:
        hi, lo = split128(key)
        return bool(self.contains([hi], [lo])[0])


def bloom_build(keys: Iterable[int], capacity: int, target_fpr: float, seed: int = 0) -> BloomFilter:
    hi, lo = _split_keys(keys)
    return BloomFilter(capacity, target_fpr, seed).add(hi, lo)


def cms_increment(sketch: CountMinSketch, key: int) -> CountMinSketch:
    return sketch.increment(key)


def cms_estimate(sketch: CountMinSketch, key: int) -> int:
    return sketch.estimate_key(key)


def cms_merge(a: CountMinSketch, b: CountMinSketch) -> CountMinSketch:
    return a.merge(b)


def xor_membership(rids: Iterable[int]) -> int:
    """Order-independent 128-bit fingerprint of a record-ID set (0 for the empty set)."""
    ids = np.fromiter((int(r) for r in set(rids)), dtype=np.uint64)
    if not len(ids):
        return 0
    hi, lo = digest_ids(ids)
    return join128(np.bitwise_xor.reduce(hi), np.bitwise_xor.reduce(lo))
