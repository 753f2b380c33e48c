"""Streaming top-M selection."""

from .core import (LOADINGS, SelectionBuffer, SelectionConfig, SelectionResult,
                   iterative_select, score_patches, select_batch, topm_union)

__all__ = [
    "SelectionConfig", "SelectionResult", "SelectionBuffer", "LOADINGS",
    "iterative_select", "select_batch", "score_patches", "topm_union",
]
