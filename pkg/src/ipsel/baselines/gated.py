"""Gated-attention pooling (tanh * sigmoid scoring) and its selection adapter.

Per task t the patch score is f_t(x) = w_t . (tanh(x U_t) * sigm(x V_t));
softmax over patches gives attention weights and the pooled vector is the
attention-weighted sum of embeddings. As a selection scorer the raw
(pre-softmax) gated logits are averaged over tasks.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, ModeError
from ..grad import engine, kernels, ops
from ..grad.layers import Linear, Module
from ..grad.rng import StreamSet
from ..grad.tensor import F32, Tensor


class GatedAttentionPool(Module):
    def __init__(self, feature_dim: int, hidden_dim: int, task_count: int,
                 streams: StreamSet, name: str = "gated", dtype=F32):
        super().__init__(name)
        self.task_count = task_count
        self.hidden_dim = hidden_dim
        self.dtype = dtype
        self.u = [self.add_child(Linear(f"{name}.task{t}.u", feature_dim, hidden_dim,
                                        streams, bias=False, dtype=dtype))
                  for t in range(task_count)]
        self.v = [self.add_child(Linear(f"{name}.task{t}.v", feature_dim, hidden_dim,
                                        streams, bias=False, dtype=dtype))
                  for t in range(task_count)]
        self.w = [self.add_child(Linear(f"{name}.task{t}.w", hidden_dim, 1,
                                        streams, bias=False, dtype=dtype))
                  for t in range(task_count)]

    def __call__(self, x: Tensor):
        """x (B, N, D) -> (pooled (B, T, D), attention weights (B, T, N))."""
        if x.ndim != 3:
            raise ContractError(f"gated pooling expects (B, N, D), got {x.shape}")
        pooled = []
        attn_np = np.empty((x.shape[0], self.task_count, x.shape[1]), dtype=x.dtype)
        for t in range(self.task_count):
            gate = ops.mul(ops.tanh(self.u[t](x)), ops.sigmoid(self.v[t](x)))
            logits = self.w[t](gate)                         # (B, N, 1)
            scores = ops.reshape(logits, (x.shape[0], 1, x.shape[1]))
            a = ops.softmax(scores, axis=-1)                 # (B, 1, N)
            attn_np[:, t] = a.data[:, 0]
            pooled.append(ops.matmul(a, x))                  # (B, 1, D)
        return ops.concat(pooled, axis=1), attn_np

    # -- selection scoring (shared with the iterative loop) -----------------

    def selection_logits(self, embeddings: np.ndarray) -> np.ndarray:
        """Mean over tasks of the raw gated logit, computed off-tape."""
        if engine.grad_enabled():
            raise ModeError("selection scoring must run inside a no-gradient scope")
        emb = np.ascontiguousarray(embeddings, dtype=self.dtype)
        total = np.zeros(emb.shape[0], dtype=self.dtype)
        for t in range(self.task_count):
            gate = (np.tanh(kernels.matmul_nn(emb, self.u[t].weight.data))
                    * _sigmoid(kernels.matmul_nn(emb, self.v[t].weight.data)))
            total += kernels.matmul_nn(gate, self.w[t].weight.data)[:, 0]
        return total / self.dtype(self.task_count)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gated_attention_pool(embeddings, pool: GatedAttentionPool):
    """Spec-shaped entry on (N, D) or (B, N, D) embeddings."""
    x = embeddings if isinstance(embeddings, Tensor) else Tensor(
        np.asarray(embeddings), tracked=False)
    if x.ndim == 2:
        x = ops.reshape(x, (1, x.shape[0], x.shape[1]))
    return pool(x)
