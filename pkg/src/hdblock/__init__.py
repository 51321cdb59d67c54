"""Hashed dynamic blocking for large-scale record deduplication."""

from .blocking import BlockingConfig, ColumnStrategy, build_index, load_config, lsh_probability
from .engine import EngineResult, IterationStats, hashed_dynamic_blocking
from .estimator import BlockIndexer, HashedDynamicBlocker, ThresholdBlocker
from .evaluation import LabelSet, naive_pair_count, pair_completeness, pair_quality, threshold_blocking
from .model import AnnotatedKey, EngineParams, KeyedRecord, KeyTable, combine_keys, hash_key
from .pairs import BlockPairSet, CandidatePair, CandidatePairs, pair_bit_index, remove_dupe_pairs

__version__ = "0.1.0"

__all__ = [
    "AnnotatedKey",
    "BlockIndexer",
    "BlockPairSet",
    "BlockingConfig",
    "CandidatePair",
    "CandidatePairs",
    "ColumnStrategy",
    "EngineParams",
    "EngineResult",
    "HashedDynamicBlocker",
    "IterationStats",
    "KeyTable",
    "KeyedRecord",
    "LabelSet",
    "ThresholdBlocker",
    "build_index",
    "combine_keys",
    "hash_key",
    "hashed_dynamic_blocking",
    "load_config",
    "lsh_probability",
    "naive_pair_count",
    "pair_bit_index",
    "pair_completeness",
    "pair_quality",
    "remove_dupe_pairs",
    "threshold_blocking",
]
