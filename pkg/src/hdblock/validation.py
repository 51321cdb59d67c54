"""Input validation helpers shared by the estimators, the index builder and the CLI."""

from __future__ import annotations

from typing import Any, Mapping

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Malformed input data; the message names the offending row or column."""


def check_records(X: Any) -> pd.DataFrame:
    """Coerce records into a DataFrame.

    Accepts a DataFrame, a sequence of mappings (one per record) or a mapping
    of column name to values.
    """
    if isinstance(X, pd.DataFrame):
        frame = X
    elif isinstance(X, Mapping):
        frame = pd.DataFrame(dict(X))
    else:
        rows = list(X)
        for i, row in enumerate(rows):
            if not isinstance(row, Mapping):
                raise DataError(f"record at row {i} is {type(row).__name__}, expected a mapping")
        frame = pd.DataFrame.from_records(rows)
    if frame.columns.duplicated().any():
        dup = frame.columns[frame.columns.duplicated()].tolist()
        raise DataError(f"duplicate column names: {dup}")
    frame = frame.reset_index(drop=True)
    frame.columns = [str(c) for c in frame.columns]
    return frame


def record_ids_from(frame: pd.DataFrame, id_column: str | None) -> np.ndarray:
    """64-bit record IDs: the ``id_column`` values, or the zero-based row ordinal."""
    if id_column is None:
        return np.arange(len(frame), dtype=np.uint64)
    if id_column not in frame.columns:
        raise DataError(f"id column {id_column!r} not found (have {list(frame.columns)})")
    out = np.empty(len(frame), dtype=np.uint64)
    for i, v in enumerate(frame[id_column].tolist()):
        try:
            iv = int(v)
            if iv != v and not isinstance(v, str):
                raise ValueError
        except (TypeError, ValueError):
            raise DataError(f"row {i}: id {v!r} in column {id_column!r} is not an integer") from None
        if not 0 <= iv < 2**64:
            raise DataError(f"row {i}: id {iv} does not fit an unsigned 64-bit integer")
        out[i] = iv
    uniq, first, counts = np.unique(out, return_index=True, return_counts=True)
    if (counts > 1).any():
        dup = uniq[counts > 1][0]
        rows = np.flatnonzero(out == dup).tolist()
        raise DataError(f"id {int(dup)} is repeated at rows {rows}")
    return out


def check_pairs(pairs: Any) -> np.ndarray:
    """Canonical ``(n, 2)`` uint64 pair array with ``rid1 < rid2``, sorted, unique, no self-pairs."""
    arr = np.asarray(pairs)
    if arr.size == 0:
        return np.zeros((0, 2), np.uint64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"pairs must have shape (n, 2), got {arr.shape}")
    if arr.dtype.kind == "i" and (arr < 0).any():
        raise DataError("record IDs must be non-negative")
    arr = arr.astype(np.uint64)
    if (arr[:, 0] == arr[:, 1]).any():
        i = int(np.flatnonzero(arr[:, 0] == arr[:, 1])[0])
        raise DataError(f"pair {i} is a self-pair ({int(arr[i, 0])})")
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    order = np.lexsort((hi, lo))
    lo, hi = lo[order], hi[order]
    keep = np.ones(len(lo), bool)
    keep[1:] = (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
    return np.stack([lo[keep], hi[keep]], axis=1)
