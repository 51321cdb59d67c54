"""Hashed dynamic blocking over a columnar inverted index.

Each phase is a map over record partitions followed by an associative reduce
(sketch merge, per-key count + XOR fold), so results do not depend on the
number of partitions or on the worker count. Blocks are never materialized
as key -> records during iterations; only :func:`finalize_blocks` does that,
once, at the end.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .hashing import digest_ids
from .model import (
    EngineParams,
    KeyTable,
    UNBOUNDED,
    combine_keys_array,
    group_keys,
    segment_bounds,
    segment_pairs,
)
from .sketches import BloomFilter, CountMinSketch, ExactKeySet

logger = logging.getLogger("hdblock.engine")

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class IterationStats:
    """Counters for one pass of rough detection + exact count.

    Occurrence counts are (record, key) rows; key counts are distinct keys.
    Iteration 0 is the top-level classification.
    """

    iteration: int
    records_dropped_max_keys: int = 0
    candidate_occurrences: int = 0
    right_sized_occurrences: int = 0
    similarity_discarded_occurrences: int = 0
    possibly_oversized_occurrences: int = 0
    possibly_oversized_keys: int = 0
    corrected_keys: int = 0
    corrected_occurrences: int = 0
    oversized_keys: int = 0
    deduplicated_keys: int = 0
    surviving_oversized_keys: int = 0
    surviving_oversized_occurrences: int = 0
    duplicate_discarded_occurrences: int = 0
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EngineResult:
    blocks: KeyTable
    iterations: list[IterationStats] = field(default_factory=list)
    converged: bool = True
    abandoned_oversized_keys: int = 0

    @property
    def n_blocks(self) -> int:
        return self.blocks.n_keys()


def _run(fn: Callable[[T], R], items: Sequence[T], n_jobs: int) -> Iterable[R]:
    if n_jobs <= 1 or len(items) <= 1:
        return map(fn, items)
    pool = ThreadPoolExecutor(max_workers=n_jobs)
    try:
        return list(pool.map(fn, items))
    finally:
        pool.shutdown()


def partition(table: KeyTable, n_partitions: int) -> list[KeyTable]:
    """Split a record-sorted table into ``n_partitions`` pieces on record boundaries."""
    n = len(table)
    if n_partitions <= 1 or n == 0:
        return [table]
    targets = (np.arange(1, n_partitions) * n) // n_partitions
    cuts = np.searchsorted(table.rid, table.rid[targets], side="left")
    edges = np.unique(np.concatenate(([0], cuts, [n])))
    return [table.take(slice(a, b)) for a, b in zip(edges[:-1], edges[1:])]


def _is_record_sorted(table: KeyTable) -> bool:
    return bool(np.all(table.rid[1:] >= table.rid[:-1])) if len(table) > 1 else True


def intersect_keys(oversized: KeyTable, params: EngineParams, n_jobs: int = 1) -> tuple[KeyTable, int]:
    """Replace each record's over-sized keys by all pairwise combinations.

    Records holding more than ``max_keys`` keys are dropped. Each new key
    carries ``psize = min(size_a, size_b)`` of its two parents. Returns the
    new table (sorted by record) and the number of dropped records.
    """
    if not _is_record_sorted(oversized):
        oversized = oversized.sorted_by_record()

    def work(part: KeyTable) -> tuple[KeyTable, int]:
        bounds = segment_bounds(part.rid)
        lengths = np.diff(bounds)
        dropped = int(np.count_nonzero(lengths > params.max_keys))
        seg, i, j = segment_pairs(bounds, max_len=params.max_keys)
        a = bounds[seg] + i
        b = bounds[seg] + j
        del seg, i, j
        ha, la, hb, lb = part.hi[a], part.lo[a], part.hi[b], part.lo[b]
        swap = (hb < ha) | ((hb == ha) & (lb < la))
        a, b = np.where(swap, b, a), np.where(swap, a, b)
        hi, lo = combine_keys_array(part.hi[a], part.lo[a], part.hi[b], part.lo[b])
        psize = np.minimum(part.size[a], part.size[b])
        out = KeyTable(part.rid[a], hi, lo, np.zeros(len(a), np.int64), psize, oversized.record_ids)
        return out, dropped

    results = list(_run(work, partition(oversized, params.n_partitions), n_jobs))
    return KeyTable.concat([r[0] for r in results]), sum(r[1] for r in results)


def approx_count(candidates: KeyTable, params: EngineParams, n_jobs: int = 1) -> CountMinSketch:
    """One sketch per partition, merged."""

    def work(part: KeyTable) -> CountMinSketch:
        return CountMinSketch(params.cms_width, params.cms_depth, params.seed).add(part.hi, part.lo)

    merged = None
    for sketch in _run(work, partition(candidates, params.n_partitions), n_jobs):
        merged = sketch if merged is None else merged.merge_into(sketch)
    return merged if merged is not None else CountMinSketch(params.cms_width, params.cms_depth, params.seed)


def rough_oversize_detection(
    candidates: KeyTable, params: EngineParams, n_jobs: int = 1, stats: IterationStats | None = None
) -> tuple[KeyTable, KeyTable]:
    """Split key occurrences into right-sized and possibly over-sized by sketch estimate.

    Over-sized keys whose estimate is above ``max_similarity`` times their
    smallest parent's size are discarded. The sketch never undercounts, so
    no truly over-sized key is classified right-sized.
    """
    sketch = approx_count(candidates, params, n_jobs)
    est = sketch.estimate(candidates.hi, candidates.lo) if len(candidates) else np.zeros(0, np.int64)
    right = est <= params.max_block_size
    psize = candidates.psize.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        similar_enough = (est / psize) <= params.max_similarity
    maybe = ~right & similar_enough
    if stats is not None:
        stats.candidate_occurrences = len(candidates)
        stats.right_sized_occurrences = int(right.sum())
        stats.possibly_oversized_occurrences = int(maybe.sum())
        stats.similarity_discarded_occurrences = int((~right & ~similar_enough).sum())
    return candidates.take(right), candidates.take(maybe)


def _fold(hi, lo, count, xh, xl):
    """Per-key count sum and XOR fold; also returns each input row's group index."""
    order, bounds = group_keys(hi, lo)
    starts = bounds[:-1]
    group = np.empty(len(hi), np.intp)
    group[order] = np.repeat(np.arange(len(starts)), np.diff(bounds))
    folded = (
        hi[order][starts],
        lo[order][starts],
        np.add.reduceat(count[order], starts),
        np.bitwise_xor.reduceat(xh[order], starts),
        np.bitwise_xor.reduceat(xl[order], starts),
    )
    return folded, group


def _count_and_xor(parts: list[KeyTable], n_jobs: int):
    """Global per-key (count, XOR) plus, per partition, each row's global key index."""

    def work(part: KeyTable):
        xh, xl = digest_ids(part.rid)
        return _fold(part.hi, part.lo, np.ones(len(part), np.int64), xh, xl)

    partials = list(_run(work, parts, n_jobs))
    if len(partials) == 1:
        return partials[0][0], [partials[0][1]]
    cols = [np.concatenate([p[0][c] for p in partials]) for c in range(5)]
    folded, partial_to_global = _fold(*cols)
    row_groups, offset = [], 0
    for (keys, group) in partials:
        row_groups.append(partial_to_global[offset + group])
        offset += len(keys[0])
    return folded, row_groups


def count_keys_and_xor_ids(
    table: KeyTable, params: EngineParams, n_jobs: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per distinct key: exact record count and XOR of record-ID digests.

    Returns ``(hi, lo, count, xor_hi, xor_lo)`` sorted by key.
    """
    parts = [p for p in partition(table, params.n_partitions) if len(p)]
    if not parts:
        z = np.zeros(0, np.uint64)
        return z, z, np.zeros(0, np.int64), z, z
    return _count_and_xor(parts, n_jobs)[0]


def exactly_count_and_dedupe(
    possibly_oversized: KeyTable, params: EngineParams, n_jobs: int = 1, stats: IterationStats | None = None
) -> tuple[KeyTable, KeyTable]:
    """Correct sketch over-counts and drop duplicate over-sized blocks.

    Returns ``(corrected_right, true_oversized)``; the latter carries exact
    block sizes. Among over-sized keys with the same membership fingerprint
    the one with the smallest key hash survives. In exact-membership mode the
    Bloom filter is replaced by an exact key set.

    Membership and size lookups are made once per distinct key; every
    occurrence then takes its key's verdict.
    """
    parts = [p for p in partition(possibly_oversized, params.n_partitions) if len(p)]
    if not parts:
        empty = KeyTable.empty()
        return empty, empty
    (khi, klo, count, xh, xl), row_groups = _count_and_xor(parts, n_jobs)
    over = count > params.max_block_size
    over_idx = np.flatnonzero(over)
    ohi, olo, oxh, oxl = khi[over_idx], klo[over_idx], xh[over_idx], xl[over_idx]

    order = np.lexsort((olo, ohi, oxl, oxh))
    first = np.ones(len(order), bool)
    first[1:] = (oxh[order][1:] != oxh[order][:-1]) | (oxl[order][1:] != oxl[order][:-1])
    survivor = np.zeros(len(khi), bool)
    survivor[over_idx[order[first]]] = True

    membership_cls = ExactKeySet if params.exact_membership else BloomFilter
    membership = membership_cls(max(1, len(ohi)), params.bloom_target_fpr, params.seed).add(ohi, olo)
    in_set = membership.contains(khi, klo)
    # 0 = corrected right-sized, 1 = surviving over-sized, 2 = discarded duplicate
    verdict = np.where(~in_set, 0, np.where(survivor, 1, 2)).astype(np.int8)

    corrected_parts, over_parts = [], []
    for part, group in zip(parts, row_groups):
        v = verdict[group]
        corrected_parts.append(part.take(v == 0))
        keep = np.flatnonzero(v == 1)
        o = part.take(keep)
        over_parts.append(KeyTable(o.rid, o.hi, o.lo, count[group[keep]], o.psize, o.record_ids))
    corrected = KeyTable.concat(corrected_parts)
    true_over = KeyTable.concat(over_parts)
    if stats is not None:
        stats.possibly_oversized_keys = len(khi)
        stats.corrected_keys = int(np.count_nonzero(~in_set))
        stats.corrected_occurrences = len(corrected)
        stats.oversized_keys = len(ohi)
        stats.surviving_oversized_keys = int(survivor.sum())
        stats.deduplicated_keys = len(ohi) - int(survivor.sum())
        stats.surviving_oversized_occurrences = len(true_over)
        stats.duplicate_discarded_occurrences = len(possibly_oversized) - len(corrected) - len(true_over)
    return corrected, true_over


def finalize_blocks(right_sized: KeyTable, params: EngineParams) -> KeyTable:
    """Materialize right-sized blocks once: exact sizes, singletons dropped, sorted by key then record."""
    if not len(right_sized):
        return KeyTable.empty()
    order, bounds = group_keys(right_sized.hi, right_sized.lo, right_sized.rid)
    t = right_sized.take(order)
    sizes = np.diff(bounds)
    if sizes.max() > params.max_block_size:
        raise AssertionError("right-sized block exceeds max_block_size")  # one-sided sketch error violated
    per_row = np.repeat(sizes, sizes)
    keep = per_row >= 2
    return KeyTable(t.rid[keep], t.hi[keep], t.lo[keep], per_row[keep], t.psize[keep], right_sized.record_ids)


def hashed_dynamic_blocking(index: KeyTable, params: EngineParams | None = None, n_jobs: int = 1) -> EngineResult:
    """Iteratively intersect over-sized blocks until every emitted block is right-sized.

    Returns the right-sized blocks (exact sizes in ``[2, max_block_size]``)
    plus per-iteration statistics. If ``max_iterations`` intersection rounds
    do not exhaust the over-sized keys, the remainder is dropped with a
    warning.
    """
    params = params or EngineParams()
    top = index.sorted_by_record() if not _is_record_sorted(index) else index
    top = KeyTable(top.rid, top.hi, top.lo, top.size, np.full(len(top), UNBOUNDED, np.int64), top.record_ids)

    stats = IterationStats(iteration=0)
    t0 = time.perf_counter()
    right, maybe = rough_oversize_detection(top, params, n_jobs, stats)
    corrected, oversized = exactly_count_and_dedupe(maybe, params, n_jobs, stats)
    stats.seconds = time.perf_counter() - t0
    _log(stats)
    history = [stats]
    right_parts = [right, corrected]

    iteration = 0
    while len(oversized) and iteration < params.max_iterations:
        iteration += 1
        stats = IterationStats(iteration=iteration)
        t0 = time.perf_counter()
        candidates, dropped = intersect_keys(oversized, params, n_jobs)
        stats.records_dropped_max_keys = dropped
        right, maybe = rough_oversize_detection(candidates, params, n_jobs, stats)
        corrected, oversized = exactly_count_and_dedupe(maybe, params, n_jobs, stats)
        stats.seconds = time.perf_counter() - t0
        _log(stats)
        history.append(stats)
        right_parts += [right, corrected]

    abandoned = 0
    if len(oversized):
        abandoned = oversized.n_keys()
        logger.warning(
            "iteration cap %d reached; dropping %d over-sized keys (%d occurrences)",
            params.max_iterations,
            abandoned,
            len(oversized),
        )
    blocks = finalize_blocks(KeyTable.concat(right_parts), params)
    return EngineResult(blocks, history, converged=not len(oversized), abandoned_oversized_keys=abandoned)


def _log(stats: IterationStats) -> None:
    logger.info(" ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in stats.as_dict().items()))
