"""Model assembly per method, and checkpoint glue.

Every method shares the patch encoder. The aggregation side differs:

  ips_transformer, rps   cross-attention transformer + one fc head per task
  ips_gated, deepmil(+)  gated-attention pooling + two-layer heads
  topmil                 two-layer heads applied per patch, logits averaged
  cnn                    encoder over the full image (plus position channel)
                         + one fc head per task

The optional patch-level read-out head rides along for methods that
produce attention over selected patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..baselines.gated import GatedAttentionPool
from ..errors import ContractError
from ..grad.checkpoint import load_into, save_checkpoint
from ..grad.rng import StreamSet
from ..model.aggregator import AggregatorConfig, CrossAttentionAggregator
from ..model.encoder import EncoderConfig, PatchEncoder
from ..model.heads import MlpHeads, PatchReadout, TaskHeads
from .config import TrainConfig

TASK_CLASSES = {"majority": 10, "max_digit": 10, "top": 10, "multi": 10}
READOUT_METHODS = ("ips_transformer", "rps", "ips_gated", "deepmil", "deepmil_plus")


@dataclass
class ModelBundle:
    method: str
    encoder: PatchEncoder
    heads: object
    streams: StreamSet
    task_names: list[str]
    class_counts: list[int]
    aggregator: CrossAttentionAggregator | None = None
    gated: GatedAttentionPool | None = None
    readout: PatchReadout | None = None
    extra: dict = field(default_factory=dict)

    def modules(self):
        mods = [self.encoder]
        if self.aggregator is not None:
            mods.append(self.aggregator)
        if self.gated is not None:
            mods.append(self.gated)
        mods.append(self.heads)
        if self.readout is not None:
            mods.append(self.readout)
        return mods

    def named_params(self):
        out = []
        for m in self.modules():
            out.extend(m.named_params())
        return out

    def trainable_params(self):
        return [p for _, p in self.named_params() if p.requires_grad]

    def base_named_params(self):
        """Everything except the read-out head (the 'base model')."""
        out = []
        for m in self.modules():
            if m is self.readout:
                continue
            out.extend(m.named_params())
        return out

    @property
    def scorer(self):
        if self.method in ("ips_transformer", "rps"):
            return self.aggregator
        if self.method in ("ips_gated", "deepmil", "deepmil_plus"):
            return self.gated
        return None

    def param_bytes(self) -> int:
        return sum(p.nbytes for _, p in self.named_params())

    def save(self, path) -> None:
        save_checkpoint(path, self.named_params())

    def load(self, path) -> None:
        load_into(self.named_params(), path)


def build_model(cfg: TrainConfig, seed: int | None = None) -> ModelBundle:
    tasks = cfg.task_list()
    class_counts = [TASK_CLASSES[t] for t in tasks]
    streams = StreamSet(cfg.seed if seed is None else seed)
    in_channels = 2 if cfg.method == "cnn" else 1
    encoder = PatchEncoder(EncoderConfig(in_channels=in_channels,
                                         base_channels=cfg.encoder_channels), streams)
    d = encoder.feature_dim

    bundle = ModelBundle(method=cfg.method, encoder=encoder, heads=None,
                         streams=streams, task_names=tasks,
                         class_counts=class_counts)

    if cfg.method in ("ips_transformer", "rps"):
        bundle.aggregator = CrossAttentionAggregator(
            AggregatorConfig(feature_dim=d, heads=cfg.heads,
                             num_queries=len(tasks), mlp_ratio=cfg.mlp_ratio,
                             dropout=cfg.dropout, attn_dropout=cfg.attn_dropout),
            streams)
        bundle.heads = TaskHeads(d, class_counts, streams)
    elif cfg.method in ("ips_gated", "deepmil", "deepmil_plus"):
        hidden = 1024 if cfg.method == "deepmil_plus" else cfg.gated_hidden
        bundle.gated = GatedAttentionPool(d, hidden, len(tasks), streams)
        bundle.heads = MlpHeads(d, class_counts, streams, hidden=cfg.head_hidden)
    elif cfg.method == "topmil":
        bundle.heads = MlpHeads(d, class_counts, streams, hidden=cfg.head_hidden)
    elif cfg.method == "cnn":
        bundle.heads = TaskHeads(d, class_counts, streams)
    else:
        raise ContractError(f"unknown method {cfg.method!r}")

    if cfg.readout:
        if cfg.method not in READOUT_METHODS:
            raise ContractError(
                f"the patch read-out needs attention over selected patches; "
                f"method {cfg.method!r} does not provide it")
        bundle.readout = PatchReadout(d, 10, streams, hidden=cfg.head_hidden)
    return bundle


def readout_attention(bundle: ModelBundle, attn: np.ndarray) -> np.ndarray:
    """Collapse per-head/per-query attention to one weight per patch.

    Mean over heads and query tokens (gated pooling: over tasks), then
    renormalized to sum to one.
    """
    if attn.ndim == 4:       # (B, H, T, M) from the transformer
        a = attn.mean(axis=(1, 2))
    elif attn.ndim == 3:     # (B, T, M) from gated pooling
        a = attn.mean(axis=1)
    else:
        raise ContractError(f"unexpected attention shape {attn.shape}")
    return a / a.sum(axis=-1, keepdims=True)
