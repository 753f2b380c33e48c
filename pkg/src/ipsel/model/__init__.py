"""Patch encoder and cross-attention aggregation."""

from .aggregator import AggregatorConfig, CrossAttentionAggregator
from .encoder import EncoderConfig, PatchEncoder
from .heads import MlpHeads, PatchReadout, TaskHeads, patch_readout, task_logits

__all__ = [
    "EncoderConfig", "PatchEncoder",
    "AggregatorConfig", "CrossAttentionAggregator",
    "TaskHeads", "MlpHeads", "task_logits", "PatchReadout", "patch_readout",
]
