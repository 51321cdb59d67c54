"""Candidate-pair materialization, deduplication and serialization.

A pair produced by several right-sized blocks is attributed to the largest
of them (ties: smallest key hash). Blocks are then re-encoded as a sorted
member list plus an optional bitmap over the block's ``n choose 2`` pairs.

File formats (version 1)::

    pairs file     #hdb-pairs v1
                   <rid1>,<rid2>,<block_key_hex>        sorted by (rid1, rid2)

    blocks file    #hdb-blocks v1
                   ><block_key_hex> <n> <rid_0>,<rid_1>,...,<rid_n-1>
                   <base64 bitmap | *>                  one pair of lines per block

``block_key_hex`` is the 32-digit big-endian hex of the 128-bit key. Bitmap
bit ``k`` is bit ``k % 8`` (least significant first) of byte ``k // 8``;
``*`` means every pair of the block is retained.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .hashing import join128, split128
from .model import KeyTable, group_keys, segment_pairs
from .validation import DataError

PAIRS_HEADER = "#hdb-pairs v1"
BLOCKS_HEADER = "#hdb-blocks v1"


def pair_bit_index(i, j, n):
    """Position of pair ``(i, j)``, ``0 <= i < j < n``, in the upper-triangular enumeration."""
    return i * (n - 1) - (i - 1) * i // 2 + j - i - 1


def tie_break_largest(blocks: Iterable[tuple[int, int]]) -> int:
    """Key of the largest block among ``(key, size)`` candidates; ties go to the smallest key."""
    best = None
    for key, size in blocks:
        if best is None or size > best[1] or (size == best[1] and key < best[0]):
            best = (key, size)
    if best is None:
        raise ValueError("tie_break_largest needs at least one candidate block")
    return best[0]


def key_hex(hi: int, lo: int) -> str:
    return f"{int(hi):016x}{int(lo):016x}"


@dataclass(frozen=True)
class CandidatePair:
    rid1: int
    rid2: int
    block: int


@dataclass
class CandidatePairs:
    """Deduplicated pairs, sorted by ``(rid1, rid2)``; columnar.

    ``block`` indexes into ``block_hi``/``block_lo``, the key of the block each
    pair is attributed to.
    """

    rid1: np.ndarray
    rid2: np.ndarray
    block: np.ndarray
    block_hi: np.ndarray
    block_lo: np.ndarray

    @classmethod
    def from_keys(cls, rid1, rid2, hi, lo) -> "CandidatePairs":
        rid1, rid2 = np.asarray(rid1, np.uint64), np.asarray(rid2, np.uint64)
        hi, lo = np.asarray(hi, np.uint64), np.asarray(lo, np.uint64)
        if not len(rid1):
            return cls.empty()
        order, bounds = group_keys(hi, lo)
        block = np.empty(len(hi), np.int32)
        block[order] = np.repeat(np.arange(len(bounds) - 1, dtype=np.int32), np.diff(bounds))
        starts = order[bounds[:-1]]
        return cls(rid1, rid2, block, hi[starts], lo[starts])

    @property
    def hi(self) -> np.ndarray:
        return self.block_hi[self.block]

    @property
    def lo(self) -> np.ndarray:
        return self.block_lo[self.block]

    def __len__(self) -> int:
        return len(self.rid1)

    def __iter__(self) -> Iterator[CandidatePair]:
        bh, bl = self.block_hi.tolist(), self.block_lo.tolist()
        keys = [join128(h, l) for h, l in zip(bh, bl)]
        for a, b, g in zip(self.rid1.tolist(), self.rid2.tolist(), self.block.tolist()):
            yield CandidatePair(a, b, keys[g])

    def to_array(self) -> np.ndarray:
        return np.stack([self.rid1, self.rid2], axis=1) if len(self) else np.zeros((0, 2), np.uint64)

    def as_set(self) -> set[tuple[int, int]]:
        return set(zip(self.rid1.tolist(), self.rid2.tolist()))

    @classmethod
    def empty(cls) -> "CandidatePairs":
        z = np.zeros(0, np.uint64)
        return cls(z, z, np.zeros(0, np.int32), z, z)


@dataclass
class BlockPairSet:
    block: int
    members: np.ndarray
    bitmap: bytes | None = None

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def n_pairs(self) -> int:
        if self.bitmap is None:
            return self.n * (self.n - 1) // 2
        bits = np.unpackbits(np.frombuffer(self.bitmap, np.uint8), bitorder="little")
        return int(bits[: self.n * (self.n - 1) // 2].sum())

    def pairs(self) -> list[tuple[int, int]]:
        n = self.n
        ti, tj = np.triu_indices(n, 1)
        if self.bitmap is not None:
            bits = np.unpackbits(np.frombuffer(self.bitmap, np.uint8), bitorder="little")[: len(ti)].astype(bool)
            ti, tj = ti[bits], tj[bits]
        m = self.members
        return list(zip(m[ti].tolist(), m[tj].tolist()))


@dataclass
class PairOutput:
    """Result of :func:`remove_dupe_pairs`: the flat pair list plus the per-block view.

    Blocks are ordered largest first (ties: smaller key); members of block
    ``g`` are ``block_members[block_bounds[g]:block_bounds[g + 1]]``, sorted.
    """

    pairs: CandidatePairs
    block_bounds: np.ndarray
    block_members: np.ndarray
    retained: np.ndarray  # retained pair count per block

    @property
    def block_hi(self) -> np.ndarray:
        return self.pairs.block_hi

    @property
    def block_lo(self) -> np.ndarray:
        return self.pairs.block_lo

    def __iter__(self) -> Iterator[BlockPairSet]:
        return self.iter_block_pair_sets()

    def iter_block_pair_sets(self) -> Iterator[BlockPairSet]:
        """Blocks that keep at least one pair; bitmap only when some pairs went to larger blocks."""
        sizes = np.diff(self.block_bounds)
        full = sizes * (sizes - 1) // 2
        partial = (self.retained > 0) & (self.retained < full)
        pb = self.pairs.block
        sel = np.flatnonzero(partial[pb])
        order = sel[np.argsort(pb[sel], kind="stable")]
        spb = pb[order]
        blocks = np.arange(len(sizes), dtype=pb.dtype)
        row_start = np.searchsorted(spb, blocks, "left").tolist()
        row_stop = np.searchsorted(spb, blocks, "right").tolist()
        for g in np.flatnonzero(self.retained > 0).tolist():
            lo_m, hi_m = self.block_bounds[g], self.block_bounds[g + 1]
            members = self.block_members[lo_m:hi_m]
            bitmap = None
            if partial[g]:
                rows = order[row_start[g] : row_stop[g]]
                n = len(members)
                i = np.searchsorted(members, self.pairs.rid1[rows]).astype(np.int64)
                j = np.searchsorted(members, self.pairs.rid2[rows]).astype(np.int64)
                bits = np.zeros(n * (n - 1) // 2, np.uint8)
                bits[pair_bit_index(i, j, n)] = 1
                bitmap = np.packbits(bits, bitorder="little").tobytes()
            yield BlockPairSet(join128(self.block_hi[g], self.block_lo[g]), members, bitmap)

    @property
    def block_sets(self) -> list[BlockPairSet]:
        return list(self.iter_block_pair_sets())


def _pair_codes(
    rid: np.ndarray, bounds: np.ndarray, wide: bool, packed: tuple[int, int] | None = None, chunk: int = 1 << 23
) -> np.ndarray:
    """Pair codes of every block, block by block, in upper-triangular order.

    With ``packed=(rid_bits, block_bits)`` each code is
    ``rid1 | rid2 | block`` in one uint64, so sorting orders copies of a pair
    by block rank.
    """
    sizes = np.diff(bounds)
    counts = sizes * (sizes - 1) // 2
    total = int(counts.sum())
    out = np.empty(total, "S16" if wide else np.uint64)
    cum = np.cumsum(counts)
    g, pos, nb = 0, 0, len(sizes)
    while g < nb:
        stop = max(g + 1, int(np.searchsorted(cum, (cum[g - 1] if g else 0) + chunk, side="right")))
        stop = min(stop, nb)
        sub = bounds[g : stop + 1] - bounds[g]
        seg, i, j = segment_pairs(sub)
        base = bounds[g] + sub[seg]
        a, b = rid[base + i], rid[base + j]
        n = len(a)
        if packed is not None:
            rbits, gbits = (np.uint64(x) for x in packed)
            block = (seg + g).astype(np.uint64)
            out[pos : pos + n] = (((a << rbits) | b) << gbits) | block
        elif wide:
            buf = np.empty((n, 2), ">u8")
            buf[:, 0], buf[:, 1] = a, b
            out[pos : pos + n] = buf.view("S16").ravel()
        else:
            out[pos : pos + n] = (a << np.uint64(32)) | b
        pos += n
        g = stop
    return out


def _decode_pair_positions(p: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    # a gather from the expanded block column; binary search over unsorted positions is far slower
    sizes = np.diff(bounds)
    block_of_pair = np.repeat(np.arange(len(sizes), dtype=np.int32), sizes * (sizes - 1) // 2)
    return block_of_pair[p]


def _sorted_by_key_then_record(t: KeyTable) -> bool:
    if len(t) < 2:
        return True
    h0, h1, l0, l1, r0, r1 = t.hi[:-1], t.hi[1:], t.lo[:-1], t.lo[1:], t.rid[:-1], t.rid[1:]
    ok = (h0 < h1) | ((h0 == h1) & ((l0 < l1) | ((l0 == l1) & (r0 < r1))))
    return bool(ok.all())


def remove_dupe_pairs(right_sized: KeyTable) -> PairOutput:
    """Materialize blocks and keep each distinct pair once, from its largest block.

    Pairs are generated best block first, so of all copies of a pair the
    earliest generated one is kept.
    """
    t = right_sized
    if not _sorted_by_key_then_record(t):
        t = t.take(group_keys(t.hi, t.lo, t.rid)[0])
    rid = t.rid
    bounds = np.concatenate(
        ([0], np.flatnonzero((t.hi[1:] != t.hi[:-1]) | (t.lo[1:] != t.lo[:-1])) + 1, [len(t)])
    ).astype(np.intp) if len(t) else np.zeros(1, np.intp)
    sizes = np.diff(bounds)
    starts = bounds[:-1]
    bhi = t.hi[starts]
    blo = t.lo[starts]
    del t

    # blocks are already in key order, so the block index stands in for (bhi, blo)
    size_bits = int(sizes.max()).bit_length() if len(sizes) else 0
    if size_bits + max(1, (len(sizes) - 1).bit_length()) <= 64:
        idx_bits = np.uint64(max(1, (len(sizes) - 1).bit_length()))
        inv = (sizes.max(initial=0) - sizes).astype(np.uint64)
        rank_order = np.argsort((inv << idx_bits) | np.arange(len(sizes), dtype=np.uint64))
    else:
        rank_order = np.lexsort((blo, bhi, -sizes))
    rank_order = rank_order[sizes[rank_order] >= 2]
    lens = sizes[rank_order]
    new_bounds = np.concatenate(([0], np.cumsum(lens))).astype(np.intp)
    gather = np.repeat(starts[rank_order] - new_bounds[:-1], lens) + np.arange(new_bounds[-1])
    rid, bhi, blo, bounds = rid[gather], bhi[rank_order], blo[rank_order], new_bounds
    del gather
    nb = len(lens)

    rid_bits = int(rid.max()).bit_length() if len(rid) else 0
    block_bits = max(1, (nb - 1).bit_length())
    if 2 * rid_bits + block_bits <= 64:
        return _dedupe_packed(rid, bounds, bhi, blo, rid_bits, block_bits)
    wide = rid_bits > 32
    codes = _pair_codes(rid, bounds, wide)
    perm = np.argsort(codes)
    codes = codes[perm]
    head = np.ones(len(codes), bool)
    head[1:] = codes[1:] != codes[:-1]
    codes = codes[head]
    starts = np.flatnonzero(head)
    del head
    # earliest generated copy of each pair = the one from the best-ranked block
    kept = np.minimum.reduceat(perm, starts) if len(perm) else perm
    del perm, starts
    if wide:
        both = codes.view(">u8").reshape(-1, 2).astype(np.uint64)
        r1, r2 = both[:, 0].copy(), both[:, 1].copy()
    else:
        r1, r2 = codes >> np.uint64(32), codes & np.uint64(0xFFFFFFFF)
    del codes
    pseg = _decode_pair_positions(kept, bounds)
    del kept
    retained = np.bincount(pseg, minlength=nb).astype(np.int64)
    return PairOutput(CandidatePairs(r1, r2, pseg, bhi, blo), bounds, rid, retained)


def _dedupe_packed(rid, bounds, bhi, blo, rid_bits: int, block_bits: int) -> PairOutput:
    # one value sort instead of an argsort: the lowest block rank of each pair comes first
    codes = _pair_codes(rid, bounds, False, packed=(rid_bits, block_bits))
    codes.sort()
    pair = codes >> np.uint64(block_bits)
    head = np.ones(len(codes), bool)
    head[1:] = pair[1:] != pair[:-1]
    del pair
    codes = codes[head]
    del head
    pseg = (codes & np.uint64((1 << block_bits) - 1)).astype(np.int32)
    codes >>= np.uint64(block_bits)
    r1 = codes >> np.uint64(rid_bits)
    r2 = codes & np.uint64((1 << rid_bits) - 1)
    del codes
    retained = np.bincount(pseg, minlength=len(bounds) - 1).astype(np.int64)
    return PairOutput(CandidatePairs(r1, r2, pseg, bhi, blo), bounds, rid, retained)


def write_pairs(pairs: CandidatePairs, path: str | Path) -> None:
    keys = [f"{h:016x}{l:016x}" for h, l in zip(pairs.block_hi.tolist(), pairs.block_lo.tolist())]
    with open(path, "w", newline="\n") as fh:
        fh.write(PAIRS_HEADER + "\n")
        chunk = 500_000
        for s in range(0, len(pairs), chunk):
            rows = zip(
                pairs.rid1[s : s + chunk].tolist(),
                pairs.rid2[s : s + chunk].tolist(),
                pairs.block[s : s + chunk].tolist(),
            )
            fh.write("".join([f"{a},{b},{keys[g]}\n" for a, b, g in rows]))


def read_pairs(path: str | Path) -> CandidatePairs:
    """Read a pairs file; the block column is optional (label-style files have two columns)."""
    r1, r2, hi, lo = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if len(fields) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 'rid1,rid2[,block_key_hex]', got {line!r}")
            try:
                a, b = int(fields[0]), int(fields[1])
                k = int(fields[2], 16) if len(fields) == 3 else 0
            except ValueError:
                if lineno == 1 or (not r1 and fields[0].strip().isidentifier()):
                    continue  # column header row
                raise DataError(f"{path}:{lineno}: malformed pair line {line!r}") from None
            if a > b:
                a, b = b, a
            h, l = split128(k)
            r1.append(a)
            r2.append(b)
            hi.append(h)
            lo.append(l)
    r1, r2 = np.array(r1, np.uint64), np.array(r2, np.uint64)
    order = np.lexsort((r2, r1))
    return CandidatePairs.from_keys(r1[order], r2[order], np.array(hi, np.uint64)[order], np.array(lo, np.uint64)[order])


def write_block_sets(blocks: Iterable[BlockPairSet], path: str | Path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(BLOCKS_HEADER + "\n")
        for bs in blocks:
            hi, lo = split128(bs.block)
            members = ",".join(map(str, bs.members.tolist()))
            fh.write(f">{key_hex(hi, lo)} {bs.n} {members}\n")
            fh.write((base64.b64encode(bs.bitmap).decode("ascii") if bs.bitmap is not None else "*") + "\n")


def read_block_sets(path: str | Path) -> list[BlockPairSet]:
    out = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if len(lines) % 2:
        raise DataError(f"{path}: truncated block file")
    for head, bitmap in zip(lines[::2], lines[1::2]):
        if not head.startswith(">"):
            raise DataError(f"{path}: expected block header, got {head!r}")
        key, n, members = head[1:].split(" ")
        mem = np.array([int(x) for x in members.split(",")], np.uint64)
        if len(mem) != int(n):
            raise DataError(f"{path}: block {key} declares {n} members, lists {len(mem)}")
        out.append(BlockPairSet(int(key, 16), mem, None if bitmap == "*" else base64.b64decode(bitmap)))
    return out
