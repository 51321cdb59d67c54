"""Dataset helpers: synthetic generators for tests/benchmarks and the DBLP-Scholar loader."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from .evaluation import LabelSet

SCHOLAR_CONFIG = {
    "seed": 0,
    "columns": [
        {"column": "title", "kind": "lsh", "tokenizer": "word", "bands": 14, "width": 4},
        {"column": "authors", "kind": "lsh", "tokenizer": "word", "bands": 14, "width": 4},
        {"column": "venue", "kind": "identity"},
        {"column": "year", "kind": "identity"},
    ],
}

PERSON_CONFIG = {
    "seed": 0,
    "columns": [
        {"column": "first_name", "kind": "identity"},
        {"column": "last_name", "kind": "identity"},
        {"column": "city", "kind": "identity"},
        {"column": "zip", "kind": "identity"},
        {"column": "birth_year", "kind": "identity"},
    ],
}


def _zipf_codes(rng: np.random.Generator, vocab: int, n: int, s: float) -> np.ndarray:
    p = 1.0 / np.arange(1, vocab + 1) ** s
    p /= p.sum()
    return rng.choice(vocab, size=n, p=p)


def _vocab(prefix: str, size: int) -> np.ndarray:
    return np.array([f"{prefix}{i}" for i in range(size)], dtype=object)


def make_person_records(n: int, seed: int = 0, duplicate_rate: float = 0.1) -> pd.DataFrame:
    """Synthetic person registry with Zipf-distributed names and planted duplicates.

    Vocabulary sizes grow with ``n`` so common values (the "jones" of the
    surname column) get proportionally larger, which is what forces
    intersections. Columns: ``entity_id`` plus the fields of
    ``PERSON_CONFIG``. Duplicates copy an earlier entity and perturb one field.
    """
    rng = np.random.default_rng(seed)
    n_dup = int(n * duplicate_rate)
    n_base = n - n_dup
    cols = {
        "first_name": (_vocab("fn", max(50, n // 200)), 1.1),
        "last_name": (_vocab("ln", max(100, n // 20)), 1.0),
        "city": (_vocab("city", max(20, n // 100)), 1.2),
        "zip": (_vocab("z", max(50, n // 50)), 0.8),
    }
    data = {}
    for name, (vocab, s) in cols.items():
        data[name] = vocab[_zipf_codes(rng, len(vocab), n_base, s)]
    data["birth_year"] = (1930 + rng.integers(0, 76, n_base)).astype(object)
    entity = np.arange(n_base)

    src = rng.integers(0, n_base, n_dup)
    perturb = rng.integers(0, len(cols) + 1, n_dup)
    names = list(cols) + ["birth_year"]
    for k, name in enumerate(names):
        col = data[name][src].copy()
        hit = perturb == k
        if name == "birth_year":
            col[hit] = (1930 + rng.integers(0, 76, hit.sum())).astype(object)
        else:
            vocab, s = cols[name]
            col[hit] = vocab[_zipf_codes(rng, len(vocab), int(hit.sum()), s)]
        data[name] = np.concatenate([data[name], col])
    entity = np.concatenate([entity, src])
    order = rng.permutation(n)
    frame = pd.DataFrame({"entity_id": entity[order], **{k: v[order] for k, v in data.items()}})
    return frame


def make_random_records(
    n: int, n_columns: int = 4, max_cardinality: int = 30, seed: int = 0, null_rate: float = 0.05
) -> pd.DataFrame:
    """Small-alphabet identity columns with random skew: many overlapping, often over-sized blocks."""
    rng = np.random.default_rng(seed)
    data = {}
    for c in range(n_columns):
        card = int(rng.integers(2, max_cardinality + 1))
        s = float(rng.uniform(0.0, 1.5))
        codes = _zipf_codes(rng, card, n, s)
        vals = _vocab(f"c{c}v", card)[codes]
        vals[rng.random(n) < null_rate] = None
        data[f"c{c}"] = vals
    return pd.DataFrame(data)


def random_identity_config(n_columns: int, seed: int = 0) -> dict:
    return {"seed": seed, "columns": [{"column": f"c{c}", "kind": "identity"} for c in range(n_columns)]}


# ---------------------------------------------------------------------------
# DBLP-Scholar (Koepcke et al. benchmark layout)


def _read_csv(path: Path) -> pd.DataFrame:
    for enc in ("utf-8", "latin-1"):
        try:
            return pd.read_csv(path, dtype=str, keep_default_na=False, encoding=enc)
        except UnicodeDecodeError:
            continue
    raise ValueError(f"{path}: cannot decode")


def _components(edges: list[tuple[int, int]], n: int) -> list[list[int]]:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    groups: dict[int, list[int]] = {}
    for x in sorted({x for e in edges for x in e}):
        groups.setdefault(find(x), []).append(x)
    return list(groups.values())


def load_dblp_scholar(directory: str | Path) -> tuple[pd.DataFrame, LabelSet]:
    """Load ``DBLP1.csv``, ``Scholar.csv`` and ``DBLP-Scholar_perfectMapping.csv``.

    Both sources are stacked into one table (record ID = row ordinal, DBLP
    first); the positive labels are every pair inside a connected component
    of the perfect mapping, which includes Scholar-Scholar duplicates that
    match the same DBLP entry.
    """
    d = Path(directory)
    dblp = _read_csv(d / "DBLP1.csv")
    scholar = _read_csv(d / "Scholar.csv")
    mapping = _read_csv(d / "DBLP-Scholar_perfectMapping.csv")
    cols = ["title", "authors", "venue", "year"]
    dblp = dblp.rename(columns=str.lower)
    scholar = scholar.rename(columns=str.lower)
    records = pd.concat([dblp[["id"] + cols], scholar[["id"] + cols]], ignore_index=True)
    records["source"] = ["dblp"] * len(dblp) + ["scholar"] * len(scholar)
    dblp_row = {v: i for i, v in enumerate(dblp["id"])}
    scholar_row = {v: i + len(dblp) for i, v in enumerate(scholar["id"])}
    mapping.columns = [c.strip().lower() for c in mapping.columns]
    edges = []
    for a, b in zip(mapping["iddblp"], mapping["idscholar"]):
        if a in dblp_row and b in scholar_row:
            edges.append((dblp_row[a], scholar_row[b]))
    pairs = []
    for comp in _components(edges, len(records)):
        comp = sorted(comp)
        pairs += [(comp[x], comp[y]) for x in range(len(comp)) for y in range(x + 1, len(comp))]
    labels = LabelSet(np.array(pairs, np.uint64).reshape(-1, 2), complete=True)
    records[cols] = records[cols].replace("", None)
    return records, labels
