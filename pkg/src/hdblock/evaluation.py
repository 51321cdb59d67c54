"""Baselines and metrics: threshold blocking, naive pair counting, PC and PQ."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .model import KeyTable, group_keys, segment_pairs
from .pairs import CandidatePairs, read_pairs, remove_dupe_pairs
from .validation import check_pairs


class UndefinedMetricError(ValueError):
    pass


class IncompleteLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSet:
    """Positive pairs (canonical ``rid1 < rid2``, unique) and whether they are complete ground truth."""

    positives: np.ndarray
    complete: bool = True

    def __post_init__(self):
        object.__setattr__(self, "positives", check_pairs(self.positives))

    def __len__(self) -> int:
        return len(self.positives)


def read_labels(path: str | Path, complete: bool = True) -> LabelSet:
    """Two-column ``rid1,rid2`` file; ``#`` comments and a header row are skipped."""
    p = read_pairs(path)
    return LabelSet(p.to_array(), complete)


def labels_from_entity_ids(rids: Sequence[int], entity_ids: Sequence[Any], attributes: Sequence[Sequence[Any]] | None = None) -> LabelSet:
    """Positive pairs among records sharing an entity ID.

    When ``attributes`` (one tuple per record) is given, pairs whose
    attributes are identical are left out, so only duplicates that differ in
    some field count as positives.
    """
    rids = np.asarray(rids, np.uint64)
    groups: dict[Any, list[int]] = {}
    for i, e in enumerate(entity_ids):
        groups.setdefault(e, []).append(i)
    out = []
    for members in groups.values():
        for x in range(len(members)):
            for y in range(x + 1, len(members)):
                a, b = members[x], members[y]
                if attributes is not None and tuple(attributes[a]) == tuple(attributes[b]):
                    continue
                out.append((int(rids[a]), int(rids[b])))
    return LabelSet(np.array(out, np.uint64).reshape(-1, 2), complete=True)


def _pair_array(P) -> np.ndarray:
    if isinstance(P, CandidatePairs):
        return P.to_array()
    if isinstance(P, (set, frozenset)):
        P = sorted(P)
    return check_pairs(P)


def _as_codes(pairs: np.ndarray) -> np.ndarray:
    buf = np.empty((len(pairs), 2), dtype=">u8")
    buf[:] = pairs
    return buf.view("S16").ravel()


def _intersection_size(a: np.ndarray, b: np.ndarray) -> int:
    if not len(a) or not len(b):
        return 0
    return len(np.intersect1d(_as_codes(a), _as_codes(b), assume_unique=True))


def pair_completeness(P, labels: LabelSet) -> float:
    """``|P ∩ L+| / |L+|``."""
    if not len(labels):
        raise UndefinedMetricError("pair completeness is undefined for an empty label set")
    return _intersection_size(_pair_array(P), labels.positives) / len(labels)


def pair_quality(P, labels: LabelSet) -> float:
    """``|P ∩ L+| / |P|``; only meaningful against complete ground truth."""
    if not labels.complete:
        raise IncompleteLabelsError(
            "pair quality needs complete ground truth; with partial labels every unlabeled "
            "true duplicate would count against the blocker"
        )
    pairs = _pair_array(P)
    if not len(pairs):
        raise UndefinedMetricError("pair quality is undefined for an empty pair set")
    return _intersection_size(pairs, labels.positives) / len(pairs)


def top_level_block_sizes(index: KeyTable) -> np.ndarray:
    if not len(index):
        return np.zeros(0, np.int64)
    _, bounds = group_keys(index.hi, index.lo)
    return np.diff(bounds)


def threshold_blocking(index: KeyTable, max_block_size: int = 500) -> CandidatePairs:
    """Pairs from top-level blocks of at most ``max_block_size`` records; larger blocks are discarded."""
    if not len(index):
        return CandidatePairs.empty()
    order, bounds = group_keys(index.hi, index.lo, index.rid)
    sizes = np.diff(bounds)
    keep = np.repeat(sizes <= max_block_size, sizes)
    return remove_dupe_pairs(index.take(order[keep])).pairs


def _encode(a: np.ndarray, b: np.ndarray, wide: bool) -> np.ndarray:
    return _as_codes(np.stack([a, b], axis=1)) if wide else (a << np.uint64(32)) | b


def naive_pair_count(index: KeyTable, chunk_pairs: int = 20_000_000) -> int:
    """Distinct record pairs sharing at least one key, no size limit.

    Blocks are expanded in batches (a single huge block in row slices) and
    merged into a running sorted set of pair codes, so memory tracks the
    number of distinct pairs plus one batch.
    """
    if not len(index):
        return 0
    order, bounds = group_keys(index.hi, index.lo, index.rid)
    rid = index.rid[order]
    sizes = np.diff(bounds)
    wide = int(rid.max()) >= 2**32
    seen = np.zeros(0, "S16" if wide else np.uint64)
    block_pairs = sizes * (sizes - 1) // 2
    g, nb = 0, len(sizes)
    while g < nb:
        if block_pairs[g] > chunk_pairs:
            members = rid[bounds[g] : bounds[g + 1]]
            n = len(members)
            rows = max(1, chunk_pairs // n)
            for s in range(0, n - 1, rows):
                ii = np.arange(s, min(s + rows, n - 1))
                cnt = n - 1 - ii
                a = np.repeat(ii, cnt)
                b = np.arange(len(a)) - np.repeat(np.cumsum(cnt) - cnt, cnt) + a + 1
                seen = np.union1d(seen, _encode(members[a], members[b], wide))
            g += 1
            continue
        cum = np.cumsum(block_pairs[g:])
        stop = g + max(1, int(np.searchsorted(cum, chunk_pairs, side="right")))
        stop = min(stop, nb)
        if (block_pairs[g:stop] > chunk_pairs).any():
            stop = g + int(np.argmax(block_pairs[g:stop] > chunk_pairs))
        sub = np.concatenate(([0], np.cumsum(sizes[g:stop]))).astype(np.intp)
        seg, i, j = segment_pairs(sub)
        base = bounds[g]
        seen = np.union1d(seen, _encode(rid[base + sub[seg] + i], rid[base + sub[seg] + j], wide))
        g = stop
    return len(seen)
