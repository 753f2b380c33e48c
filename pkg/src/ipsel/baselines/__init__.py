"""Reference aggregators and selectors for comparison runs."""

from .cnn import cnn_forward, cnn_inputs, sinusoid_channel
from .gated import GatedAttentionPool, gated_attention_pool
from .rps import random_select
from .topmil import topmil_select

__all__ = [
    "GatedAttentionPool", "gated_attention_pool",
    "topmil_select", "random_select",
    "cnn_forward", "cnn_inputs", "sinusoid_channel",
]
