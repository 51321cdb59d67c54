"""Hashed data model shared by block building, the engine and pair output.

Only 64-bit record IDs and 128-bit key hashes flow through the engine. The
per-record view (:class:`KeyedRecord`) exists for the public API and for
tests; internally the inverted index is a columnar :class:`KeyTable`, one row
per (record, key) occurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .hashing import (
    MASK128,
    SEPARATOR,
    join128,
    murmur3_128,
    murmur3_words,
    split128,
    to_bytes128,
)

UNBOUNDED = np.iinfo(np.int64).max  # psize of top-level keys: no parent


def hash_key(attribute_id: str, normalized_value: str) -> int:
    """128-bit blocking key for ``value`` under ``attribute_id``.

    The two parts are joined with a 0x1F separator so that ("ab", "c") and
    ("a", "bc") hash differently.
    """
    if not attribute_id:
        raise ValueError("attribute_id must be non-empty")
    if not normalized_value:
        raise ValueError("normalized_value must be non-empty")
    return murmur3_128(attribute_id.encode("utf-8") + SEPARATOR + normalized_value.encode("utf-8"))


def hash_key_bytes(attribute_id: str, payload: bytes) -> int:
    return murmur3_128(attribute_id.encode("utf-8") + SEPARATOR + payload)


def combine_keys(a: int, b: int) -> int:
    """Key of the intersection of blocks ``a`` and ``b``; requires ``a < b``.

    Digest of the 32 bytes ``a || b`` (each little-endian). Callers order the
    arguments; the digest itself is not symmetric.
    """
    assert 0 <= a < b <= MASK128, "combine_keys requires a < b"
    return murmur3_128(to_bytes128(a) + to_bytes128(b))


def combine_keys_array(a_hi, a_lo, b_hi, b_lo) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`combine_keys`; every ``a`` must sort before its ``b``."""
    return murmur3_words([a_lo, a_hi, b_lo, b_hi])


@dataclass(frozen=True)
class AnnotatedKey:
    key: int
    size: int = 0
    psize: int = int(UNBOUNDED)


@dataclass(frozen=True)
class KeyedRecord:
    rid: int
    keys: tuple[AnnotatedKey, ...] = ()

    def __post_init__(self):
        seen = {k.key for k in self.keys}
        if len(seen) != len(self.keys):
            raise ValueError(f"record {self.rid}: duplicate keys")


@dataclass(frozen=True)
class EngineParams:
    """Thresholds and sketch settings for one engine run."""

    max_block_size: int = 500
    max_keys: int = 80
    max_similarity: float = 0.9
    max_iterations: int = 20
    bloom_target_fpr: float = 1e-8
    cms_width: int = 1 << 20
    cms_depth: int = 5
    seed: int = 0
    exact_membership: bool = False
    n_partitions: int = 1

    def __post_init__(self):
        if self.max_block_size < 2:
            raise ValueError(f"max_block_size must be >= 2, got {self.max_block_size}")
        if self.max_keys < 2:
            raise ValueError(f"max_keys must be >= 2, got {self.max_keys}")
        if not (0 < self.max_similarity <= 1) or math.isnan(self.max_similarity):
            raise ValueError(f"max_similarity must be in (0, 1], got {self.max_similarity}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not (0 < self.bloom_target_fpr < 1):
            raise ValueError(f"bloom_target_fpr must be in (0, 1), got {self.bloom_target_fpr}")
        if self.cms_width < 1 or self.cms_depth < 1:
            raise ValueError("cms_width and cms_depth must be positive")
        if self.n_partitions < 1:
            raise ValueError(f"n_partitions must be >= 1, got {self.n_partitions}")

    def with_(self, **changes) -> "EngineParams":
        return replace(self, **changes)


def _u64(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.uint64)


def _i64(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.int64)


@dataclass(frozen=True)
class KeyTable:
    """Columnar inverted index: row ``i`` says record ``rid[i]`` holds key ``(hi[i], lo[i])``.

    ``size`` is the exact block size once counted (0 = unknown) and ``psize``
    the smallest parent block size (``UNBOUNDED`` for top-level keys).
    ``record_ids`` optionally lists every record of the dataset, including
    those that hold no key.
    """

    rid: np.ndarray
    hi: np.ndarray
    lo: np.ndarray
    size: np.ndarray
    psize: np.ndarray
    record_ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.rid)
        for name in ("hi", "lo", "size", "psize"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"KeyTable column {name!r} has length {len(getattr(self, name))}, expected {n}")

    @classmethod
    def build(cls, rid, hi, lo, size=None, psize=None, record_ids=None) -> "KeyTable":
        rid = _u64(rid)
        n = len(rid)
        size = np.zeros(n, np.int64) if size is None else _i64(size)
        psize = np.full(n, UNBOUNDED, np.int64) if psize is None else _i64(psize)
        return cls(rid, _u64(hi), _u64(lo), size, psize, None if record_ids is None else _u64(record_ids))

    @classmethod
    def empty(cls) -> "KeyTable":
        return cls.build([], [], [])

    @classmethod
    def from_records(cls, records: Iterable[KeyedRecord]) -> "KeyTable":
        rid, hi, lo, size, psize, ids = [], [], [], [], [], []
        for rec in records:
            ids.append(rec.rid)
            for k in rec.keys:
                h, l = split128(k.key)
                rid.append(rec.rid)
                hi.append(h)
                lo.append(l)
                size.append(k.size)
                psize.append(k.psize)
        return cls.build(rid, hi, lo, size, psize, record_ids=ids)

    def to_records(self) -> list[KeyedRecord]:
        """Per-record view, ordered by record ID then key."""
        t = self.sorted_by_record()
        out: dict[int, list[AnnotatedKey]] = {}
        if t.record_ids is not None:
            for r in np.sort(t.record_ids):
                out[int(r)] = []
        for r, h, l, s, p in zip(t.rid.tolist(), t.hi.tolist(), t.lo.tolist(), t.size.tolist(), t.psize.tolist()):
            out.setdefault(r, []).append(AnnotatedKey(join128(h, l), s, p))
        return [KeyedRecord(r, tuple(keys)) for r, keys in sorted(out.items())]

    def __len__(self) -> int:
        return len(self.rid)

    @property
    def keys(self) -> list[int]:
        return [join128(h, l) for h, l in zip(self.hi.tolist(), self.lo.tolist())]

    def take(self, idx) -> "KeyTable":
        return KeyTable(self.rid[idx], self.hi[idx], self.lo[idx], self.size[idx], self.psize[idx], self.record_ids)

    def sorted_by_record(self) -> "KeyTable":
        return self.take(record_key_order(self.rid, self.hi, self.lo))

    def sorted_by_key(self) -> "KeyTable":
        return self.take(group_keys(self.hi, self.lo, self.rid)[0])

    @staticmethod
    def concat(tables: Sequence["KeyTable"]) -> "KeyTable":
        tables = [t for t in tables if t is not None]
        if not tables:
            return KeyTable.empty()
        ids = next((t.record_ids for t in tables if t.record_ids is not None), None)
        return KeyTable(
            np.concatenate([t.rid for t in tables]),
            np.concatenate([t.hi for t in tables]),
            np.concatenate([t.lo for t in tables]),
            np.concatenate([t.size for t in tables]),
            np.concatenate([t.psize for t in tables]),
            ids,
        )

    def n_records(self) -> int:
        return len(np.unique(self.rid))

    def n_keys(self) -> int:
        if not len(self):
            return 0
        return len(group_keys(self.hi, self.lo)[1]) - 1


def group_keys(hi: np.ndarray, lo: np.ndarray, *extra) -> tuple[np.ndarray, np.ndarray]:
    """Sort rows by key (then by ``extra`` columns) and locate key groups.

    Returns ``(order, bounds)``: ``order`` sorts the rows; the rows of group
    ``g`` are ``order[bounds[g]:bounds[g + 1]]``. Without ``extra`` the order
    of rows inside a group is unspecified.
    """
    if len(extra) == 1 and len(hi):
        packed = _key_then_minor(hi, lo, extra[0])
        if packed is not None:
            return packed
    if not extra and len(hi):
        # hi alone almost always separates keys; fall back when two keys share it
        order = np.argsort(hi)
        shi, slo = hi[order], lo[order]
        if np.any((shi[1:] == shi[:-1]) & (slo[1:] != slo[:-1])):
            order = np.lexsort((lo, hi))
            shi, slo = hi[order], lo[order]
    else:
        sort_cols = tuple(reversed(extra)) + (lo, hi)
        order = np.lexsort(sort_cols) if len(hi) else np.zeros(0, np.intp)
        shi, slo = hi[order], lo[order]
    if len(order):
        change = np.flatnonzero((shi[1:] != shi[:-1]) | (slo[1:] != slo[:-1])) + 1
    else:
        change = np.zeros(0, np.intp)
    if not len(order):
        return order, np.zeros(1, np.intp)
    bounds = np.concatenate(([0], change, [len(order)])).astype(np.intp)
    return order, bounds


def _key_ranks(hi: np.ndarray, lo: np.ndarray):
    """Dense rank of each row's key in (hi, lo) order, plus the key grouping."""
    order, bounds = group_keys(hi, lo)
    n_keys = len(bounds) - 1
    rank = np.empty(len(hi), np.uint64)
    rank[order] = np.repeat(np.arange(n_keys, dtype=np.uint64), np.diff(bounds))
    return rank, n_keys, order, bounds


def _fits(values: np.ndarray, n_keys: int) -> int | None:
    # bits for ``values`` if they pack next to a key rank in one uint64
    if values.dtype.kind not in "ui" or (values.dtype.kind == "i" and len(values) and values.min() < 0):
        return None
    bits = int(values.max()).bit_length() if len(values) else 0
    return bits if bits + max(1, (n_keys - 1).bit_length()) <= 64 else None


def _key_then_minor(hi, lo, minor):
    """Exact (hi, lo, minor) order by two single-column sorts; None when ranks and minor do not pack."""
    order, bounds = group_keys(hi, lo)
    minor = np.asarray(minor)
    bits = _fits(minor, len(bounds) - 1)
    if bits is None:
        return None
    sizes = np.diff(bounds)
    if sizes.max() == 1:
        return order, bounds
    rank = np.repeat(np.arange(len(sizes), dtype=np.uint64), sizes)
    packed = (rank << np.uint64(bits)) | minor[order].astype(np.uint64)
    return order[np.argsort(packed)], bounds


def record_key_order(rid: np.ndarray, hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """Row order by (rid, hi, lo)."""
    if not len(rid):
        return np.zeros(0, np.intp)
    rank, n_keys, _, _ = _key_ranks(hi, lo)
    rid_bits = _fits(rid, 1)
    key_bits = max(1, (n_keys - 1).bit_length())
    if rid_bits is None or rid_bits + key_bits > 64:
        return np.lexsort((lo, hi, rid))
    return np.argsort((rid.astype(np.uint64) << np.uint64(key_bits)) | rank)


def key_bytes(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """Pack 128-bit keys into big-endian ``S16`` values whose byte order is numeric order."""
    buf = np.empty((len(hi), 2), dtype=">u8")
    buf[:, 0] = hi
    buf[:, 1] = lo
    return buf.view("S16").ravel()


def segment_bounds(values: np.ndarray) -> np.ndarray:
    """Boundaries of runs of equal values in an already-sorted array."""
    if not len(values):
        return np.zeros(1, np.intp)
    change = np.flatnonzero(values[1:] != values[:-1]) + 1
    return np.concatenate(([0], change, [len(values)])).astype(np.intp)


def segment_pairs(bounds: np.ndarray, max_len: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All index pairs ``(i, j)``, ``i < j``, inside each segment ``[bounds[g], bounds[g+1])``.

    Returns ``(seg, i_local, j_local)`` ordered by segment, then ``i``, then
    ``j`` (upper-triangular order within a segment). Segments longer than
    ``max_len`` are skipped.
    """
    lengths = np.diff(bounds)
    ok = lengths >= 2
    if max_len is not None:
        ok &= lengths <= max_len
    z = np.zeros(0, np.intp)
    if not ok.any():
        return z, z, z
    seg_of_row = np.repeat(np.arange(len(lengths)), lengths)
    ends = np.repeat(bounds[1:], lengths)
    rows = np.arange(bounds[-1], dtype=np.intp) if len(bounds) else z
    anchor = np.repeat(ok, lengths) & (rows < ends - 1)
    a = rows[anchor]
    cnt = (ends[anchor] - 1 - a).astype(np.intp)
    first = np.repeat(a, cnt)
    offset = np.arange(len(first), dtype=np.intp) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    seg = seg_of_row[first]
    base = bounds[seg]
    return seg, first - base, first + 1 + offset - base
