"""Cross-modal view-mixed transformer decoder with an attention cost model."""

from .attention import AttentionParams, standard_attention, view_mixed_attention
from .cost import CostReport, crossover, instrument_forward, standard_attention_cost, vma_attention_cost
from .errors import (
    CaverError,
    ConfigError,
    CostMismatchError,
    DimensionError,
    FormatError,
    MissingWeightError,
    NonFiniteError,
    PatchError,
)
from .ptre import PatchTokenSequence, TokenSequence, from_patch_tokens, to_patch_tokens
from .tipp import TippConfig, tipp_forward, zero_weights
from .weights import init_weights, load_features, load_weights, synthetic_features

__all__ = [
    "AttentionParams", "standard_attention", "view_mixed_attention",
    "CostReport", "crossover", "instrument_forward", "standard_attention_cost", "vma_attention_cost",
    "CaverError", "ConfigError", "CostMismatchError", "DimensionError", "FormatError",
    "MissingWeightError", "NonFiniteError", "PatchError",
    "PatchTokenSequence", "TokenSequence", "from_patch_tokens", "to_patch_tokens",
    "TippConfig", "tipp_forward", "zero_weights",
    "init_weights", "load_features", "load_weights", "synthetic_features",
]
