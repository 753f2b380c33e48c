"""Classification heads: per-task linear maps and the patch-level read-out."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from ..grad import ops
from ..grad.layers import Linear, Module
from ..grad.rng import StreamSet
from ..grad.tensor import F32, Tensor


def _per_task_inputs(pooled: Tensor, task_count: int) -> list[Tensor]:
    """Split (B, T, D) into per-task (B, D); a (B, D) input feeds every task."""
    if pooled.ndim == 2:
        return [pooled] * task_count
    if pooled.ndim != 3 or pooled.shape[1] != task_count:
        raise ContractError(
            f"expected (B, {task_count}, D) pooled vectors, got {pooled.shape}")
    outs = []
    for t in range(task_count):
        z_t = ops.slice_(pooled, 1, t, t + 1)
        outs.append(ops.reshape(z_t, (pooled.shape[0], pooled.shape[2])))
    return outs


class TaskHeads(Module):
    """One linear map feature_dim -> n_classes per task."""

    def __init__(self, feature_dim: int, class_counts, streams: StreamSet,
                 name: str = "heads", dtype=F32):
        super().__init__(name)
        self.class_counts = list(class_counts)
        self.heads = [
            self.add_child(Linear(f"{name}.task{t}", feature_dim, c, streams, dtype=dtype))
            for t, c in enumerate(self.class_counts)
        ]

    def __call__(self, pooled: Tensor) -> list[Tensor]:
        """pooled (B, T, D) or (B, D) -> per-task logits [(B, C_t)]."""
        inputs = _per_task_inputs(pooled, len(self.heads))
        return [head(z) for head, z in zip(self.heads, inputs)]


class MlpHeads(Module):
    """Two-layer per-task heads (hidden + ReLU) used by the MIL baselines."""

    def __init__(self, feature_dim: int, class_counts, streams: StreamSet,
                 hidden: int = 128, name: str = "heads", dtype=F32):
        super().__init__(name)
        self.class_counts = list(class_counts)
        self.dtype = dtype
        self.fc1 = [self.add_child(Linear(f"{name}.task{t}.fc1", feature_dim, hidden,
                                          streams, dtype=dtype))
                    for t in range(len(self.class_counts))]
        self.fc2 = [self.add_child(Linear(f"{name}.task{t}.fc2", hidden, c,
                                          streams, dtype=dtype))
                    for t, c in enumerate(self.class_counts)]

    def task_head(self, t: int, z: Tensor) -> Tensor:
        return self.fc2[t](ops.relu(self.fc1[t](z)))

    def __call__(self, pooled: Tensor) -> list[Tensor]:
        inputs = _per_task_inputs(pooled, len(self.class_counts))
        return [self.task_head(t, z) for t, z in enumerate(inputs)]

    def per_patch(self, t: int, embeddings: Tensor) -> Tensor:
        """(B, M, D) -> per-patch logits (B, M, C_t) for task t."""
        return self.task_head(t, embeddings)

    def max_logit(self, embeddings: np.ndarray) -> np.ndarray:
        """Per-patch max class logit over all tasks, off-tape (TopMIL score)."""
        from ..grad import kernels
        emb = np.ascontiguousarray(embeddings, dtype=self.dtype)
        best = None
        for t in range(len(self.class_counts)):
            h = np.maximum(kernels.matmul_nn(emb, self.fc1[t].weight.data)
                           + self.fc1[t].bias.data, 0.0)
            logits = kernels.matmul_nn(h, self.fc2[t].weight.data) + self.fc2[t].bias.data
            m = logits.max(axis=1)
            best = m if best is None else np.maximum(best, m)
        return best.astype(self.dtype)


def task_logits(pooled: Tensor, heads) -> list[Tensor]:
    return heads(pooled)


class PatchReadout(Module):
    """Per-patch classifier trained through detached embeddings (two layers).

    The image-level logit is the attention-weighted sum of patch scores;
    the activation (sigmoid) is applied by the loss. Callers pass detached
    embeddings and attention so no gradient reaches the base model.
    """

    def __init__(self, feature_dim: int, n_classes: int, streams: StreamSet,
                 hidden: int = 128, name: str = "readout", dtype=F32):
        super().__init__(name)
        self.fc1 = self.add_child(Linear(f"{name}.fc1", feature_dim, hidden,
                                         streams, dtype=dtype))
        self.fc2 = self.add_child(Linear(f"{name}.fc2", hidden, n_classes,
                                         streams, dtype=dtype))

    def patch_scores(self, embeddings: Tensor) -> Tensor:
        """(B, M, D) or (M, D) detached embeddings -> per-patch class scores."""
        return self.fc2(ops.relu(self.fc1(embeddings)))

    def __call__(self, embeddings: Tensor, attention: Tensor):
        """Returns (per-patch scores, image-level pre-activation logits).

        `attention` (B, M, 1) must already be detached and renormalized to
        sum to one over the patches.
        """
        scores = self.patch_scores(embeddings)           # (B, M, C)
        weighted = ops.mul(scores, attention)            # broadcast over C
        image_logits = ops.sum_(weighted, axis=1)        # (B, C)
        return scores, image_logits


def patch_readout(embeddings: Tensor, attention, readout: PatchReadout):
    """Spec-shaped entry: detach inputs, score patches, pool with attention.

    Returns (per-patch scores, image prediction after sigmoid).
    """
    emb = embeddings.detach() if isinstance(embeddings, Tensor) else Tensor(
        np.asarray(embeddings), tracked=False)
    attn = np.asarray(attention.data if isinstance(attention, Tensor) else attention)
    if attn.ndim == 1:
        attn = attn[None, :]
    attn = attn / attn.sum(axis=-1, keepdims=True)
    attn_t = Tensor(attn[..., None].astype(emb.dtype), tracked=False)
    if emb.ndim == 2:
        emb = ops.reshape(emb, (1, emb.shape[0], emb.shape[1]))
    scores, image_logits = readout(emb, attn_t)
    return scores, ops.sigmoid(image_logits)
