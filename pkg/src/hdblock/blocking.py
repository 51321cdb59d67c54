"""Top-level block building: records -> inverted index of blocking keys.

Three strategies, configured per column:

* ``identity`` -- one key per normalized attribute value, namespaced by column.
* ``token`` -- schema-agnostic; one key per distinct token, shared across columns.
* ``lsh`` -- minhash the column's token set and hash each band of ``w``
  minhashes into one key, ``b`` keys per value.

:func:`build_index` hashes each distinct raw value of a column once and then
scatters the keys back onto records, so cost is driven by the number of
distinct values rather than the number of rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from .hashing import MASK64, derive_seed, fmix64, murmur3_128, murmur3_words, split128, to_bytes128
from .model import KeyTable, hash_key, record_key_order
from .validation import check_records, record_ids_from

KINDS = ("identity", "token", "lsh")
TOKENIZERS = ("word", "word-ngram", "char-qgram")
TOKEN_NAMESPACE = "__token__"


class ConfigError(ValueError):
    pass


def normalize(raw: Any) -> str:
    """Lower-case, collapse internal whitespace, strip. ``None``/NaN -> ``""``."""
    if raw is None:
        return ""
    if isinstance(raw, float) and math.isnan(raw):
        return ""
    return " ".join(str(raw).lower().split())


def tokenize(text: str, tokenizer: str = "word", n: int = 2) -> list[str]:
    """Tokens of already-normalized ``text``; duplicates are kept."""
    if not text:
        return []
    if tokenizer == "word":
        return text.split(" ")
    if tokenizer == "word-ngram":
        words = text.split(" ")
        if len(words) <= n:
            return [text]
        return [" ".join(words[i : i + n]) for i in range(len(words) - n + 1)]
    if tokenizer == "char-qgram":
        if len(text) <= n:
            return [text]
        return [text[i : i + n] for i in range(len(text) - n + 1)]
    raise ConfigError(f"unknown tokenizer {tokenizer!r}; expected one of {TOKENIZERS}")


@dataclass(frozen=True)
class ColumnStrategy:
    """How one column produces top-level keys.

    ``column="*"`` is only meaningful for ``kind="token"`` and means every
    attribute of the record. ``ngram`` is the ``n``/``q`` of the n-gram
    tokenizers.
    """

    column: str
    kind: str = "identity"
    tokenizer: str = "word"
    ngram: int = 2
    lsh_bands: int = 0
    lsh_band_width: int = 0

    def __post_init__(self):
        if not self.column:
            raise ConfigError("strategy column must be non-empty")
        if self.kind not in KINDS:
            raise ConfigError(f"column {self.column!r}: unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.tokenizer not in TOKENIZERS:
            raise ConfigError(f"column {self.column!r}: unknown tokenizer {self.tokenizer!r}")
        if self.ngram < 1:
            raise ConfigError(f"column {self.column!r}: ngram must be >= 1")
        if self.kind == "lsh" and (self.lsh_bands < 1 or self.lsh_band_width < 1):
            raise ConfigError(f"column {self.column!r}: lsh requires lsh_bands >= 1 and lsh_band_width >= 1")
        if self.column == "*" and self.kind != "token":
            raise ConfigError("column '*' is only valid for token strategies")

    @property
    def num_minhashes(self) -> int:
        return self.lsh_bands * self.lsh_band_width

    def tokens(self, value: Any) -> list[str]:
        return tokenize(normalize(value), self.tokenizer, self.ngram)


@dataclass(frozen=True)
class BlockingConfig:
    strategies: tuple[ColumnStrategy, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("blocking config needs at least one strategy")
        seen = set()
        for s in self.strategies:
            if (s.column, s.kind) in seen:
                raise ConfigError(f"duplicate strategy for column {s.column!r} kind {s.kind!r}")
            seen.add((s.column, s.kind))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BlockingConfig":
        """Build from the documented config schema.

        ``{"seed": 0, "columns": [{"column": "title", "kind": "lsh",
        "tokenizer": "word", "bands": 14, "width": 4}, ...]}``
        """
        if not isinstance(data, Mapping) or "columns" not in data:
            raise ConfigError("config must be a mapping with a 'columns' list")
        strategies = []
        for i, entry in enumerate(data["columns"]):
            if not isinstance(entry, Mapping) or "column" not in entry:
                raise ConfigError(f"columns[{i}] must be a mapping with a 'column' field")
            unknown = set(entry) - {"column", "kind", "tokenizer", "ngram", "bands", "width"}
            if unknown:
                raise ConfigError(f"columns[{i}]: unknown fields {sorted(unknown)}")
            strategies.append(
                ColumnStrategy(
                    column=str(entry["column"]),
                    kind=entry.get("kind", "identity"),
                    tokenizer=entry.get("tokenizer", "word"),
                    ngram=int(entry.get("ngram", 2)),
                    lsh_bands=int(entry.get("bands", 0)),
                    lsh_band_width=int(entry.get("width", 0)),
                )
            )
        return cls(tuple(strategies), int(data.get("seed", 0)))

    def to_dict(self) -> dict:
        cols = []
        for s in self.strategies:
            entry = {"column": s.column, "kind": s.kind}
            if s.kind != "identity":
                entry["tokenizer"] = s.tokenizer
                if s.tokenizer != "word":
                    entry["ngram"] = s.ngram
            if s.kind == "lsh":
                entry["bands"] = s.lsh_bands
                entry["width"] = s.lsh_band_width
            cols.append(entry)
        return {"seed": self.seed, "columns": cols}


def load_config(path: str | Path) -> BlockingConfig:
    """Read a blocking config from a YAML or JSON file."""
    if not Path(path).is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    return BlockingConfig.from_dict(data)


# ---------------------------------------------------------------------------
# per-record key functions


def identity_keys(record: Mapping[str, Any], strategy: ColumnStrategy) -> set[int]:
    assert strategy.kind == "identity"
    value = normalize(record.get(strategy.column))
    return {hash_key(strategy.column, value)} if value else set()


def token_keys(record: Mapping[str, Any], strategy: ColumnStrategy | None = None) -> set[int]:
    """One key per distinct token over the record's attributes, not namespaced by column."""
    strategy = strategy or ColumnStrategy("*", "token")
    columns = record.keys() if strategy.column == "*" else [strategy.column]
    keys = set()
    for col in columns:
        for tok in strategy.tokens(record.get(col)):
            keys.add(hash_key(TOKEN_NAMESPACE, tok))
    return keys


def _token_hash(token: str) -> int:
    return murmur3_128(token.encode("utf-8")) & MASK64


def _position_seeds(m: int, seed: int) -> np.ndarray:
    return np.array([derive_seed(seed, i) for i in range(m)], dtype=np.uint64)


def _minhash_matrix(token_hashes: np.ndarray, bounds: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Signatures for consecutive non-empty token segments; shape ``(n_segments, m)``."""
    seeds = _position_seeds(m, seed)
    n_seg = len(bounds) - 1
    out = np.empty((n_seg, m), dtype=np.uint64)
    budget = max(1, 4_000_000 // max(m, 1))
    g = 0
    while g < n_seg:
        # take as many whole segments as fit in the element budget
        stop = int(np.searchsorted(bounds, bounds[g] + budget, side="right")) - 1
        stop = min(max(stop, g + 1), n_seg)
        lo, hi = bounds[g], bounds[stop]
        mixed = fmix64(token_hashes[lo:hi, None] ^ seeds[None, :])
        out[g:stop] = np.minimum.reduceat(mixed, bounds[g:stop] - lo, axis=0)
        g = stop
    return out


def minhash_signature(tokens: Iterable[str], m: int, seed: int = 0) -> np.ndarray:
    """``m`` seeded 64-bit minhashes of a token set; position ``i`` uses its own seeded hash."""
    toks = sorted(set(tokens))
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not toks:
        raise ValueError("cannot compute a signature of an empty token set")
    th = np.array([_token_hash(t) for t in toks], dtype=np.uint64)
    return _minhash_matrix(th, np.array([0, len(th)]), m, seed)[0]


def band_tags(column: str, bands: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-band 128-bit tags; each band key hashes ``tag || minhashes``."""
    tags = [split128(hash_key(column, f"lsh-band:{i}")) for i in range(bands)]
    return np.array([t[0] for t in tags], np.uint64), np.array([t[1] for t in tags], np.uint64)


def _band_keys(sig: np.ndarray, bands: int, width: int, tag_hi, tag_lo) -> tuple[np.ndarray, np.ndarray]:
    """Band keys for a signature matrix ``(n, bands*width)`` -> ``(hi, lo)`` of shape ``(n, bands)``."""
    n = sig.shape[0]
    hi = np.empty((n, bands), np.uint64)
    lo = np.empty((n, bands), np.uint64)
    for i in range(bands):
        words = [np.full(n, tag_lo[i]), np.full(n, tag_hi[i])]
        words += [sig[:, i * width + k] for k in range(width)]
        hi[:, i], lo[:, i] = murmur3_words(words)
    return hi, lo


def band_key(column: str, band: int, minhashes: Sequence[int]) -> int:
    """Scalar form of one band key (same bytes as the vectorized path)."""
    tag = hash_key(column, f"lsh-band:{band}")
    payload = to_bytes128(tag) + b"".join(int(h).to_bytes(8, "little") for h in minhashes)
    return murmur3_128(payload)


def lsh_keys(tokens: Iterable[str], strategy: ColumnStrategy, seed: int = 0) -> set[int]:
    assert strategy.kind == "lsh"
    toks = set(tokens)
    if not toks:
        return set()
    sig = minhash_signature(toks, strategy.num_minhashes, seed)
    w = strategy.lsh_band_width
    return {band_key(strategy.column, i, sig[i * w : (i + 1) * w]) for i in range(strategy.lsh_bands)}


def lsh_probability(b: int, w: int, j: float) -> float:
    """Probability that two values with Jaccard ``j`` share at least one of ``b`` bands of width ``w``."""
    if not 0.0 <= j <= 1.0:
        raise ValueError(f"Jaccard must be in [0, 1], got {j}")
    if b < 1 or w < 1:
        raise ValueError(f"b and w must be >= 1, got {b}, {w}")
    return 1.0 - (1.0 - j**w) ** b


def _universe_for(j: float, max_universe: int = 200) -> int:
    for u in range(20, max_universe + 1):
        if abs(j * u - round(j * u)) < 1e-9:
            return u
    return 100


def simulate_band_sharing(
    b: int, w: int, j: float, n_samples: int = 10_000, seed: int = 0, universe: int | None = None
) -> float:
    """Monte-Carlo rate at which pairs of token sets with Jaccard ``j`` share a band key.

    Every sample draws fresh random 64-bit token digests; the pair shares
    ``round(j * universe)`` of ``universe`` tokens, the rest split between
    the two sides. Band keys go through the same minhash/band code as
    :func:`build_index`.
    """
    u = universe or _universe_for(j)
    shared = int(round(j * u))
    only = u - shared
    a_only = (only + 1) // 2
    size_a = shared + a_only
    size_b = u - a_only
    rng = np.random.default_rng(seed)
    m = b * w
    tag_hi, tag_lo = band_tags("simulation", b)
    hits = 0
    chunk = max(1, 2_000_000 // (u * m))
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        pool = rng.integers(0, 2**64, size=(n, u), dtype=np.uint64)
        set_a = pool[:, :size_a].ravel()
        set_b = pool[:, a_only:].ravel()
        sig_a = _minhash_matrix(set_a, np.arange(n + 1) * size_a, m, seed)
        sig_b = _minhash_matrix(set_b, np.arange(n + 1) * size_b, m, seed)
        ah, al = _band_keys(sig_a, b, w, tag_hi, tag_lo)
        bh, bl = _band_keys(sig_b, b, w, tag_hi, tag_lo)
        hits += int(np.count_nonzero(((ah == bh) & (al == bl)).any(axis=1)))
        done += n
    return hits / n_samples


# ---------------------------------------------------------------------------
# whole-dataset index building


def _ragged_gather(codes: np.ndarray, counts: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For row ``r`` with code ``codes[r]``, emit flat positions ``offsets[c] .. offsets[c] + counts[c]``.

    Negative codes emit nothing. Returns ``(row, flat_position)``.
    """
    valid = codes >= 0
    rows = np.flatnonzero(valid)
    c = codes[valid]
    lengths = counts[c]
    row = np.repeat(rows, lengths)
    starts = np.repeat(offsets[c], lengths)
    within = np.arange(len(row)) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    return row, starts + within


def _keys_per_unique(uniques: Sequence[Any], fn) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Apply ``fn(value) -> iterable of int keys`` to each unique value; flatten."""
    counts = np.zeros(len(uniques), np.int64)
    flat: list[int] = []
    for i, v in enumerate(uniques):
        ks = fn(v)
        counts[i] = len(ks)
        flat.extend(ks)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    hi = np.fromiter(((k >> 64) & MASK64 for k in flat), np.uint64, len(flat))
    lo = np.fromiter((k & MASK64 for k in flat), np.uint64, len(flat))
    return counts, offsets, hi, lo


def _lsh_keys_per_unique(uniques: Sequence[Any], strategy: ColumnStrategy, seed: int):
    token_sets = [sorted(set(strategy.tokens(v))) for v in uniques]
    counts = np.array([strategy.lsh_bands if t else 0 for t in token_sets], np.int64)
    nonempty = [t for t in token_sets if t]
    b, w = strategy.lsh_bands, strategy.lsh_band_width
    if nonempty:
        vocab: dict[str, int] = {}
        flat = [vocab.setdefault(t, _token_hash(t)) for ts in nonempty for t in ts]
        th = np.array(flat, np.uint64)
        bounds = np.concatenate(([0], np.cumsum([len(t) for t in nonempty])))
        sig = _minhash_matrix(th, bounds, strategy.num_minhashes, seed)
        tag_hi, tag_lo = band_tags(strategy.column, b)
        hi, lo = _band_keys(sig, b, w, tag_hi, tag_lo)
        hi, lo = hi.ravel(), lo.ravel()
    else:
        hi = lo = np.zeros(0, np.uint64)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    return counts, offsets, hi, lo


def _strategy_columns(strategy: ColumnStrategy, frame: pd.DataFrame, id_column: str | None) -> list[str]:
    if strategy.column == "*":
        return [c for c in frame.columns if c != id_column]
    if strategy.column not in frame.columns:
        raise ConfigError(f"column {strategy.column!r} not present in input (have {list(frame.columns)})")
    return [strategy.column]


def _is_multi(v: Any) -> bool:
    return isinstance(v, (list, tuple))


def _column_values(values: pd.Series, kind: str) -> tuple[pd.Series, np.ndarray | None]:
    """Flatten multi-valued cells (lists, e.g. from JSON lines).

    Identity strategies get one value per element, with the owning row of
    each element returned alongside; token strategies see the elements
    joined by spaces.
    """
    # cheap C-level type scan; only mixed/object columns can hold lists
    if pd.api.types.infer_dtype(values, skipna=True) not in ("mixed", "mixed-integer"):
        return values, None
    if not values.map(_is_multi).any():
        return values, None
    if kind == "identity":
        exploded = values.explode()
        return exploded.reset_index(drop=True), exploded.index.to_numpy(np.intp)
    return values.map(lambda v: " ".join(str(x) for x in v) if _is_multi(v) else v), None


def build_index(records, config: BlockingConfig, id_column: str | None = None) -> KeyTable:
    """Inverted index (record -> keys) for ``records`` under ``config``.

    ``records`` may be a DataFrame, a sequence of mappings or a mapping of
    columns. Record IDs come from ``id_column`` when given, else from the
    zero-based row ordinal. Keys are unique per record; rows are sorted by
    record ID then key.
    """
    frame = check_records(records)
    rids = record_ids_from(frame, id_column)
    parts_row, parts_hi, parts_lo = [], [], []
    for strategy in config.strategies:
        for col in _strategy_columns(strategy, frame, id_column):
            values, rows_of = _column_values(frame[col], strategy.kind)
            codes, uniques = pd.factorize(values, sort=False, use_na_sentinel=True)
            uniques = list(uniques)
            if strategy.kind == "identity":
                counts, offsets, hi, lo = _keys_per_unique(uniques, lambda v, s=strategy: identity_keys({s.column: v}, s))
            elif strategy.kind == "token":
                counts, offsets, hi, lo = _keys_per_unique(
                    uniques, lambda v, s=strategy, c=col: token_keys({c: v}, ColumnStrategy(c, "token", s.tokenizer, s.ngram))
                )
            else:
                counts, offsets, hi, lo = _lsh_keys_per_unique(uniques, strategy, config.seed)
            row, pos = _ragged_gather(np.asarray(codes), counts, offsets)
            if rows_of is not None:
                row = rows_of[row]
            parts_row.append(row)
            parts_hi.append(hi[pos])
            parts_lo.append(lo[pos])
    row = np.concatenate(parts_row) if parts_row else np.zeros(0, np.intp)
    hi = np.concatenate(parts_hi) if parts_hi else np.zeros(0, np.uint64)
    lo = np.concatenate(parts_lo) if parts_lo else np.zeros(0, np.uint64)
    rid = rids[row]
    order = record_key_order(rid, hi, lo)
    rid, hi, lo = rid[order], hi[order], lo[order]
    if len(rid):
        keep = np.ones(len(rid), bool)
        keep[1:] = (rid[1:] != rid[:-1]) | (hi[1:] != hi[:-1]) | (lo[1:] != lo[:-1])
        rid, hi, lo = rid[keep], hi[keep], lo[keep]
    return KeyTable.build(rid, hi, lo, record_ids=rids)
