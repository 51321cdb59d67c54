"""scikit-learn style front end.

``BlockIndexer`` is a stateless transformer from records to the key index;
``HashedDynamicBlocker`` and ``ThresholdBlocker`` are transductive: ``fit``
blocks the given records and ``fit_transform`` returns the candidate pairs
as an ``(n, 2)`` array of record IDs.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .blocking import BlockingConfig, load_config
from .blocking import build_index
from .engine import hashed_dynamic_blocking
from .evaluation import LabelSet, pair_completeness, pair_quality, threshold_blocking
from .model import EngineParams, KeyTable
from .pairs import remove_dupe_pairs


def resolve_config(config: Any) -> BlockingConfig:
    if isinstance(config, BlockingConfig):
        return config
    if isinstance(config, Mapping):
        return BlockingConfig.from_dict(config)
    if isinstance(config, (str, Path)):
        return load_config(config)
    raise TypeError(f"config must be a BlockingConfig, mapping or path, got {type(config).__name__}")


class BlockIndexer(TransformerMixin, BaseEstimator):
    """Records -> :class:`KeyTable` of top-level blocking keys."""

    def __init__(self, config=None, id_column=None):
        self.config = config
        self.id_column = id_column

    def fit(self, X=None, y=None):
        if self.config is None:
            raise ValueError("BlockIndexer needs a blocking config")
        self.config_ = resolve_config(self.config)
        return self

    def transform(self, X) -> KeyTable:
        check_is_fitted(self, "config_")
        return build_index(X, self.config_, self.id_column)


class _Blocker(BaseEstimator):
    def _index(self, X) -> KeyTable:
        if isinstance(X, KeyTable):
            return X
        return BlockIndexer(self.config, self.id_column).fit_transform(X)

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).pairs_.to_array()

    def evaluate(self, labels: LabelSet) -> dict:
        """PC, and PQ when ``labels`` is complete, of the fitted pair set."""
        check_is_fitted(self, "pairs_")
        report = {
            "pairs": len(self.pairs_),
            "positives": len(labels),
            "pair_completeness": pair_completeness(self.pairs_, labels),
        }
        if labels.complete:
            report["pair_quality"] = pair_quality(self.pairs_, labels)
        return report


class HashedDynamicBlocker(_Blocker):
    """Hashed dynamic blocking.

    Fitted attributes: ``index_`` (top-level keys), ``blocks_`` (right-sized
    blocks with exact sizes), ``pairs_`` (deduplicated
    :class:`~hdblock.pairs.CandidatePairs`), ``pair_output_`` (per-block
    view), ``iterations_`` (per-iteration statistics), ``converged_``.
    ``X`` may also be a pre-built :class:`KeyTable`, in which case ``config``
    is not used.
    """

    def __init__(
        self,
        config=None,
        id_column=None,
        max_block_size=500,
        max_keys=80,
        max_similarity=0.9,
        max_iterations=20,
        bloom_target_fpr=1e-8,
        cms_width=1 << 20,
        cms_depth=5,
        seed=0,
        exact_membership=False,
        n_partitions=None,
        n_jobs=1,
    ):
        self.config = config
        self.id_column = id_column
        self.max_block_size = max_block_size
        self.max_keys = max_keys
        self.max_similarity = max_similarity
        self.max_iterations = max_iterations
        self.bloom_target_fpr = bloom_target_fpr
        self.cms_width = cms_width
        self.cms_depth = cms_depth
        self.seed = seed
        self.exact_membership = exact_membership
        self.n_partitions = n_partitions
        self.n_jobs = n_jobs

    def engine_params(self) -> EngineParams:
        return EngineParams(
            max_block_size=self.max_block_size,
            max_keys=self.max_keys,
            max_similarity=self.max_similarity,
            max_iterations=self.max_iterations,
            bloom_target_fpr=self.bloom_target_fpr,
            cms_width=self.cms_width,
            cms_depth=self.cms_depth,
            seed=self.seed,
            exact_membership=self.exact_membership,
            n_partitions=self.n_partitions or max(1, self.n_jobs),
        )

    def fit(self, X, y=None):
        params = self.engine_params()
        t0 = time.perf_counter()
        self.index_ = self._index(X)
        t1 = time.perf_counter()
        result = hashed_dynamic_blocking(self.index_, params, n_jobs=max(1, self.n_jobs))
        t2 = time.perf_counter()
        self.pair_output_ = remove_dupe_pairs(result.blocks)
        t3 = time.perf_counter()
        self.blocks_ = result.blocks
        self.pairs_ = self.pair_output_.pairs
        self.iterations_ = result.iterations
        self.n_iterations_ = len(result.iterations) - 1
        self.converged_ = result.converged
        self.abandoned_oversized_keys_ = result.abandoned_oversized_keys
        self.timings_ = {"index": t1 - t0, "engine": t2 - t1, "pairs": t3 - t2}
        return self


class ThresholdBlocker(_Blocker):
    """Baseline: keep top-level blocks of at most ``max_block_size`` records, discard the rest."""

    def __init__(self, config=None, id_column=None, max_block_size=500):
        self.config = config
        self.id_column = id_column
        self.max_block_size = max_block_size

    def fit(self, X, y=None):
        if self.max_block_size < 2:
            raise ValueError(f"max_block_size must be >= 2, got {self.max_block_size}")
        self.index_ = self._index(X)
        self.pairs_ = threshold_blocking(self.index_, self.max_block_size)
        return self
