import random
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdblock.model import KeyTable
from hdblock.hashing import split128
from hdblock.pairs import (
    CandidatePairs,
    pair_bit_index,
    read_block_sets,
    read_pairs,
    remove_dupe_pairs,
    tie_break_largest,
    write_block_sets,
    write_pairs,
)
from hdblock.validation import DataError

from _oracle import attributed_pairs, block_pairs


def blocks_table(blocks: dict[int, set[int]]) -> KeyTable:
    rid, hi, lo = [], [], []
    for key, members in blocks.items():
        h, l = split128(key)
        for r in members:
            rid.append(r)
            hi.append(h)
            lo.append(l)
    sizes = {k: len(m) for k, m in blocks.items()}
    size = [sizes[(h << 64) | l] for h, l in zip(hi, lo)]
    return KeyTable.build(rid, hi, lo, size, size)


def attribution(out) -> dict[tuple[int, int], int]:
    return {(p.rid1, p.rid2): p.block for p in out.pairs}


def test_subsumed_block_contributes_nothing():
    out = remove_dupe_pairs(blocks_table({101: {1, 2, 3}, 202: {2, 3}}))
    assert attribution(out) == {(1, 2): 101, (1, 3): 101, (2, 3): 101}
    sets = out.block_sets
    assert [b.block for b in sets] == [101]
    assert sets[0].bitmap is None and sets[0].members.tolist() == [1, 2, 3]


def test_disjoint_blocks_have_no_bitmaps():
    out = remove_dupe_pairs(blocks_table({5: {1, 2, 3}, 6: {4, 5, 6, 7}, 7: {8, 9}}))
    sets = out.block_sets
    assert all(b.bitmap is None for b in sets)
    assert sum(b.n_pairs for b in sets) == len(out.pairs) == 3 + 6 + 1
    assert [b.n for b in sets] == [4, 3, 2]


def test_partial_block_gets_bitmap():
    out = remove_dupe_pairs(blocks_table({9: {1, 2, 3, 4}, 3: {3, 4, 5}}))
    small = [b for b in out.block_sets if b.block == 3][0]
    assert small.bitmap is not None
    # members 3,4,5: pair (3,4) is index 0 and goes to the larger block
    assert small.pairs() == [(3, 5), (4, 5)]
    assert np.unpackbits(np.frombuffer(small.bitmap, np.uint8), bitorder="little")[:3].tolist() == [0, 1, 1]


# offsets select the packed-sort path, the 64-bit code path and the 128-bit code path
@pytest.mark.parametrize("offset", [0, 2**31, 2**40])
@pytest.mark.parametrize("seed", range(10))
def test_random_overlap_matches_oracle(seed, offset):
    rng = random.Random(seed)
    blocks = {}
    for _ in range(rng.randint(5, 40)):
        key = rng.getrandbits(128)
        blocks[key] = {offset + r for r in rng.sample(range(100), rng.randint(2, 25))}
    out = remove_dupe_pairs(blocks_table(blocks))
    pairs = list(zip(out.pairs.rid1.tolist(), out.pairs.rid2.tolist()))
    assert len(pairs) == len(set(pairs))
    assert pairs == sorted(pairs)
    assert set(pairs) == block_pairs({k: frozenset(v) for k, v in blocks.items()})
    assert attribution(out) == attributed_pairs({k: frozenset(v) for k, v in blocks.items()})
    for (a, b), key in attribution(out).items():
        assert a in blocks[key] and b in blocks[key]
    regrouped = {p for bs in out.block_sets for p in bs.pairs()}
    assert regrouped == set(pairs)
    assert sum(bs.n_pairs for bs in out.block_sets) == len(pairs)


def test_empty_input():
    out = remove_dupe_pairs(KeyTable.empty())
    assert len(out.pairs) == 0 and out.block_sets == []


def test_wide_record_ids():
    base = 2**40
    out = remove_dupe_pairs(blocks_table({1: {base + 1, base + 2, 3}, 2: {base + 2, 3}}))
    assert out.pairs.as_set() == {(3, base + 1), (3, base + 2), (base + 1, base + 2)}
    assert set(out.pairs.block_hi.tolist()) == {0}


@pytest.mark.parametrize("i,j,n,expected", [(0, 1, 2, 0), (1, 3, 5, 5), (2, 3, 4, 5)])
def test_pair_bit_index_examples(i, j, n, expected):
    assert pair_bit_index(i, j, n) == expected


def test_pair_bit_index_bijection():
    for n in range(2, 101):
        got = [pair_bit_index(i, j, n) for i, j in combinations(range(n), 2)]
        assert got == list(range(n * (n - 1) // 2))


def test_pair_bit_index_vectorized():
    i, j = np.triu_indices(37, 1)
    assert pair_bit_index(i.astype(np.int64), j.astype(np.int64), 37).tolist() == list(range(len(i)))


def test_tie_break_examples():
    assert tie_break_largest([(7, 3), (9, 5)]) == 9
    assert tie_break_largest([(20, 4), (10, 4)]) == 10
    with pytest.raises(ValueError):
        tie_break_largest([])


def test_tie_break_permutation_invariant():
    rng = random.Random(0)
    for _ in range(100):
        cands = [(rng.getrandbits(128), rng.choice([3, 4, 4, 5])) for _ in range(rng.randint(1, 8))]
        expected = tie_break_largest(cands)
        for _ in range(5):
            rng.shuffle(cands)
            assert tie_break_largest(cands) == expected


@given(st.dictionaries(st.integers(1, 2**128 - 1), st.sets(st.integers(0, 30), min_size=2, max_size=10), max_size=12))
def test_attribution_property(blocks):
    out = remove_dupe_pairs(blocks_table(blocks))
    assert attribution(out) == attributed_pairs({k: frozenset(v) for k, v in blocks.items()})


def test_pair_file_roundtrip(tmp_path):
    out = remove_dupe_pairs(blocks_table({2**127 + 5: {1, 2, 3}, 77: {3, 4}}))
    path = tmp_path / "pairs.csv"
    write_pairs(out.pairs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "#hdb-pairs v1"
    assert lines[1] == "1,2," + f"{2**127 + 5:032x}"
    back = read_pairs(path)
    assert list(back) == list(out.pairs)


def test_read_pairs_accepts_labels_with_header(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("id1,id2\n5,3\n1,2\n")
    assert read_pairs(path).to_array().tolist() == [[1, 2], [3, 5]]


@pytest.mark.parametrize("body", ["1,2\n3\n", "1,2\nx,y\n", "1,2,zz\n"])
def test_read_pairs_rejects_malformed(tmp_path, body):
    path = tmp_path / "bad.csv"
    path.write_text("#hdb-pairs v1\n" + body)
    with pytest.raises(DataError):
        read_pairs(path)


def test_block_file_roundtrip(tmp_path):
    out = remove_dupe_pairs(blocks_table({9: {1, 2, 3, 4}, 3: {3, 4, 5}, 4: {7, 8}}))
    path = tmp_path / "blocks.txt"
    write_block_sets(out.block_sets, path)
    back = read_block_sets(path)
    assert [(b.block, b.members.tolist(), b.bitmap) for b in back] == [
        (b.block, b.members.tolist(), b.bitmap) for b in out.block_sets
    ]


def test_block_file_truncated(tmp_path):
    path = tmp_path / "blocks.txt"
    path.write_text("#hdb-blocks v1\n>00000000000000000000000000000001 2 1,2\n")
    with pytest.raises(DataError):
        read_block_sets(path)


def test_from_keys_groups_blocks():
    p = CandidatePairs.from_keys([1, 1, 2], [2, 3, 3], [0, 0, 1], [5, 6, 5])
    assert [c.block for c in p] == [5, 6, (1 << 64) | 5]
    assert len(p.block_hi) == 3
