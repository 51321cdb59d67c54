"""128-bit Murmur3 (x64_128) hashing, scalar and vectorized.

Scalar digests of variable-length byte strings go through ``mmh3``. The
engine hashes millions of fixed-width inputs per iteration (intersected key
pairs, record IDs), so those run through a numpy port of the same function
that operates on whole arrays of little-endian 64-bit words. Both paths
produce bit-identical digests; the test-suite checks this.

A 128-bit digest is represented as a Python ``int`` (``lo | hi << 64``, the
little-endian reading of the 16 digest bytes) on the scalar side, and as a
pair of ``uint64`` arrays ``(hi, lo)`` on the vectorized side.
"""

from __future__ import annotations

from typing import Sequence

import mmh3
import numpy as np

MASK64 = (1 << 64) - 1
MASK128 = (1 << 128) - 1
SEPARATOR = b"\x1f"

_C1 = np.uint64(0x87C37B91114253D5)
_C2 = np.uint64(0x4CF5AD432745937F)
_FM1 = np.uint64(0xFF51AFD7ED558CCD)
_FM2 = np.uint64(0xC4CEB9FE1A85EC53)
_GOLDEN = 0x9E3779B97F4A7C15


def murmur3_128(data: bytes, seed: int = 0) -> int:
    """Murmur3 x64_128 digest of ``data`` as an unsigned 128-bit int."""
    return mmh3.hash128(data, seed=seed & 0xFFFFFFFF, x64arch=True, signed=False)


def split128(value: int) -> tuple[int, int]:
    return (value >> 64) & MASK64, value & MASK64


def join128(hi: int, lo: int) -> int:
    return (int(hi) << 64) | int(lo)


def to_bytes128(value: int) -> bytes:
    return value.to_bytes(16, "little")


def _rotl(x: np.ndarray, r: int) -> np.ndarray:
    return (x << np.uint64(r)) | (x >> np.uint64(64 - r))


_CHUNK = 1 << 16  # elements per pass; keeps every temporary in cache


def _fmix64_inplace(k: np.ndarray, tmp: np.ndarray) -> None:
    s33 = np.uint64(33)
    np.right_shift(k, s33, out=tmp)
    k ^= tmp
    k *= _FM1
    np.right_shift(k, s33, out=tmp)
    k ^= tmp
    k *= _FM2
    np.right_shift(k, s33, out=tmp)
    k ^= tmp


def fmix64(k):
    """Murmur3 64-bit finalizer; accepts arrays or numpy scalars (uint64)."""
    k = np.array(k, dtype=np.uint64)
    flat = k.reshape(-1)
    tmp = np.empty(min(len(flat), _CHUNK), np.uint64)
    with np.errstate(over="ignore"):
        for s in range(0, len(flat), _CHUNK):
            part = flat[s : s + _CHUNK]
            _fmix64_inplace(part, tmp[: len(part)])
    return k if k.ndim else k[()]


def derive_seed(seed: int, index: int) -> int:
    """Deterministic 64-bit sub-seed for position ``index`` of a seeded family."""
    x = np.uint64((seed + (index + 1) * _GOLDEN) & MASK64)
    return int(fmix64(x))


def murmur3_words(words: Sequence[np.ndarray], seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Murmur3 x64_128 over inputs made of ``len(words)`` 64-bit words.

    ``words[i]`` holds the i-th little-endian word of every input, so the
    hashed message for element ``e`` is ``words[0][e] || words[1][e] || ...``
    (8 * len(words) bytes). Returns ``(hi, lo)``.
    """
    n_words = len(words)
    if n_words == 0:
        raise ValueError("at least one word is required")
    words = [np.asarray(w, dtype=np.uint64) for w in words]
    shape = np.broadcast_shapes(*(w.shape for w in words))
    if len(shape) != 1 or shape[0] <= _CHUNK:
        return _murmur3_block(words, shape, seed)
    hi = np.empty(shape, np.uint64)
    lo = np.empty(shape, np.uint64)
    for s in range(0, shape[0], _CHUNK):
        sl = slice(s, s + _CHUNK)
        part = [w[sl] if w.ndim else w for w in words]
        hi[sl], lo[sl] = _murmur3_block(part, (len(hi[sl]),), seed)
    return hi, lo


def _murmur3_block(words: list[np.ndarray], shape: tuple, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_words = len(words)
    seed64 = np.uint64(seed & 0xFFFFFFFF)
    with np.errstate(over="ignore"):
        h1 = np.full(shape, seed64, dtype=np.uint64)
        h2 = np.full(shape, seed64, dtype=np.uint64)
        n_blocks = n_words // 2
        for blk in range(n_blocks):
            k1 = words[2 * blk] * _C1
            k1 = _rotl(k1, 31) * _C2
            h1 ^= k1
            h1 = _rotl(h1, 27) + h2
            h1 = h1 * np.uint64(5) + np.uint64(0x52DCE729)
            k2 = words[2 * blk + 1] * _C2
            k2 = _rotl(k2, 33) * _C1
            h2 ^= k2
            h2 = _rotl(h2, 31) + h1
            h2 = h2 * np.uint64(5) + np.uint64(0x38495AB5)
        if n_words % 2:
            # an 8-byte tail only ever touches k1
            k1 = words[-1] * _C1
            k1 = _rotl(k1, 31) * _C2
            h1 ^= k1
        length = np.uint64(8 * n_words)
        h1 ^= length
        h2 ^= length
        h1 = h1 + h2
        h2 = h2 + h1
        h1 = fmix64(h1)
        h2 = fmix64(h2)
        h1 = h1 + h2
        h2 = h2 + h1
    return h2, h1


def digest_ids(ids: np.ndarray, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized 128-bit digest of 64-bit record IDs (8-byte little-endian input)."""
    return murmur3_words([np.asarray(ids, dtype=np.uint64)], seed)


def digest_id(rid: int, seed: int = 0) -> int:
    return murmur3_128(int(rid).to_bytes(8, "little"), seed)
