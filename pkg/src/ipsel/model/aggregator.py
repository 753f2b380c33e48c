"""Cross-attention transformer that pools selected patch embeddings.

One learnable query token per task attends over the patch embeddings with
multi-head cross-attention; per query the block computes

    z   = MCA(x + pos)
    z'  = LN(z + query_tokens)
    out = LN(MLP(z') + z')

The same projection weights and query tokens also produce the scalar
selection score of a patch: the mean over heads and query tokens of the
scaled query-key logits. Scoring uses raw (pre-softmax) logits, which
makes a patch's score independent of whichever other patches are in the
chunk and lets the selection buffer cache it. Because the head blocks
partition the projected dimensions, that mean collapses to a single dot
product with a fixed vector, computed without the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, ModeError
from ..grad import engine, kernels, ops
from ..grad.layers import Dropout, LayerNorm, Linear, Module
from ..grad.rng import StreamSet
from ..grad.tensor import F32, Tensor, parameter


@dataclass
class AggregatorConfig:
    feature_dim: int
    heads: int = 8
    num_queries: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1
    attn_dropout: float = 0.1
    # Dropout hurts when only a handful of patches are aggregated; both
    # dropouts are disabled automatically for m <= small_m_threshold.
    small_m_threshold: int = 5

    def __post_init__(self):
        if self.feature_dim % self.heads != 0:
            raise ContractError(
                f"feature_dim {self.feature_dim} not divisible by heads {self.heads}")

    @property
    def d_head(self) -> int:
        return self.feature_dim // self.heads


class CrossAttentionAggregator(Module):
    def __init__(self, config: AggregatorConfig, streams: StreamSet,
                 name: str = "aggregator", dtype=F32):
        super().__init__(name)
        self.config = config
        self.dtype = dtype
        d = config.feature_dim
        dk_total = config.heads * config.d_head

        def proj(suffix, d_in, d_out):
            return self.add_child(Linear(f"{name}.{suffix}", d_in, d_out, streams,
                                         bias=False, dtype=dtype))

        self.wq = proj("wq", d, dk_total)
        self.wk = proj("wk", d, dk_total)
        self.wv = proj("wv", d, dk_total)
        self.wo = proj("wo", dk_total, d)
        bound = float(np.sqrt(1.0 / d))
        q_init = streams.fresh(f"init.{name}.query_tokens").uniform(
            -bound, bound, size=(config.num_queries, d)).astype(dtype)
        self.query_tokens = self.register(parameter(
            q_init, name=f"{name}.query_tokens", dtype=dtype))
        self.ln1 = self.add_child(LayerNorm(f"{name}.ln1", d, dtype=dtype))
        self.ln2 = self.add_child(LayerNorm(f"{name}.ln2", d, dtype=dtype))
        self.mlp1 = self.add_child(Linear(f"{name}.mlp1", d, config.mlp_ratio * d,
                                          streams, dtype=dtype))
        self.mlp2 = self.add_child(Linear(f"{name}.mlp2", config.mlp_ratio * d, d,
                                          streams, dtype=dtype))
        self.attn_drop = Dropout(config.attn_dropout, streams, f"{name}.attn")
        self.block_drop1 = Dropout(config.dropout, streams, f"{name}.block1")
        self.block_drop2 = Dropout(config.dropout, streams, f"{name}.block2")

    # -- multi-head cross-attention ------------------------------------------

    def cross_attention(self, x: Tensor, use_dropout: bool = True):
        """x (B, M, D) -> pooled (B, T, D) and attention weights (B, H, T, M).

        The returned weights are detached numpy values (interpretability
        and the read-out head use them; gradients flow through the tape).
        """
        if x.ndim != 3:
            raise ContractError(f"cross_attention expects (B, M, D), got {x.shape}")
        cfg = self.config
        m = x.shape[1]
        drop_on = use_dropout and m > cfg.small_m_threshold
        q_proj = self.wq(self.query_tokens)          # (T, H*Dk)
        k_proj = self.wk(x)                          # (B, M, H*Dk)
        v_proj = self.wv(x)                          # (B, M, H*Dv)
        inv_sqrt = 1.0 / float(np.sqrt(cfg.d_head))

        z_heads = []
        attn_np = np.empty((x.shape[0], cfg.heads, cfg.num_queries, m),
                           dtype=x.dtype)
        for h in range(cfg.heads):
            lo, hi = h * cfg.d_head, (h + 1) * cfg.d_head
            q_h = ops.slice_(q_proj, 1, lo, hi)      # (T, Dk)
            k_h = ops.slice_(k_proj, 2, lo, hi)      # (B, M, Dk)
            v_h = ops.slice_(v_proj, 2, lo, hi)      # (B, M, Dv)
            logits = ops.scale(ops.matmul(q_h, k_h, transpose_b=True), inv_sqrt)
            a_h = ops.softmax(logits, axis=-1)       # (B, T, M)
            attn_np[:, h] = a_h.data
            if drop_on:
                a_h = self.attn_drop(a_h)
            z_heads.append(ops.matmul(a_h, v_h))     # (B, T, Dv)
        z = self.wo(ops.concat(z_heads, axis=-1))    # (B, T, D)
        return z, attn_np

    def transformer_forward(self, embeddings: Tensor, pos: Tensor | None = None,
                            use_dropout: bool = True):
        """Selected embeddings (B, M, D) -> per-query pooled vectors (B, T, D)."""
        x = embeddings
        if pos is not None:
            if pos.shape[-2] != x.shape[1]:
                raise ContractError(
                    f"positional rows {pos.shape[-2]} != patch count {x.shape[1]}")
            x = ops.embedding_add(x, pos)
        m = x.shape[1]
        drop_on = use_dropout and m > self.config.small_m_threshold
        z, attn = self.cross_attention(x, use_dropout=use_dropout)
        if drop_on:
            z = self.block_drop1(z)
        z1 = self.ln1(ops.add(z, self.query_tokens))
        h = self.mlp2(ops.relu(self.mlp1(z1)))
        if drop_on:
            h = self.block_drop2(h)
        z_out = self.ln2(ops.add(h, z1))
        return z_out, attn

    # -- shared selection scoring ---------------------------------------------

    def selection_vector(self) -> np.ndarray:
        """The D-vector s with score(x) = x . s.

        Mean over heads and query tokens of (q W^q)(x W^k)^T / sqrt(Dk)
        equals x . (W^k q_bar) with q_bar the mean projected query divided
        by (H * sqrt(Dk)), because the head blocks partition the columns.
        """
        cfg = self.config
        q_proj = kernels.matmul_nn(self.query_tokens.data, self.wq.weight.data)
        q_bar = q_proj.mean(axis=0, dtype=self.dtype) / (
            self.dtype(cfg.heads) * self.dtype(np.sqrt(cfg.d_head)))
        return kernels.matmul_nn(self.wk.weight.data,
                                 np.ascontiguousarray(q_bar[:, None]))[:, 0]

    def selection_logits(self, embeddings: np.ndarray) -> np.ndarray:
        """Per-patch scores for already position-encoded embeddings (K, D)."""
        if engine.grad_enabled():
            raise ModeError("selection scoring must run inside a no-gradient scope")
        vec = self.selection_vector()
        return kernels.matmul_nn(embeddings, np.ascontiguousarray(vec[:, None]))[:, 0]

    def prepare_selection(self):
        """Freeze the scoring vector for one selection run (params are
        read-only while selecting, so this is exactly selection_logits)."""
        if engine.grad_enabled():
            raise ModeError("selection scoring must run inside a no-gradient scope")
        vec = np.ascontiguousarray(self.selection_vector()[:, None])

        def score(embeddings: np.ndarray) -> np.ndarray:
            return kernels.matmul_nn(embeddings, vec)[:, 0]

        return score

    def attention_over(self, embeddings: np.ndarray) -> np.ndarray:
        """Eval-only per-head/query softmax attention (H, T, M) over a set."""
        with engine.no_grad(), engine.eval_mode():
            x = Tensor(np.asarray(embeddings, dtype=self.dtype)[None], tracked=False)
            _, attn = self.cross_attention(x, use_dropout=False)
        return attn[0]
