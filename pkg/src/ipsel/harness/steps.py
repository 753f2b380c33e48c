"""Method dispatch shared by the training loop and evaluation.

One step is: select patch indices for the method (no-grad), re-embed the
selected patches (training or eval mode), aggregate, compute per-task
logits. Losses sum softmax cross-entropy over the single-label tasks and
sigmoid cross-entropy for the multi-label task.
"""

from __future__ import annotations

import numpy as np

from ..baselines.cnn import cnn_inputs
from ..baselines.rps import random_select
from ..baselines.topmil import topmil_select
from ..data.patches import tile
from ..data.posenc import positional_rows
from ..errors import ContractError
from ..grad import ops
from ..grad.tensor import Tensor, constant
from ..selection.core import SelectionConfig, select_batch
from .config import TrainConfig
from .models import ModelBundle, readout_attention

TASK_KIND = {"majority": "single", "max_digit": "single", "top": "single",
             "multi": "multi"}


def onehot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def selection_config(cfg: TrainConfig) -> SelectionConfig:
    return SelectionConfig(buffer_size=cfg.buffer_size, chunk_size=cfg.chunk_size,
                           loading=cfg.loading, use_pos=cfg.use_pos)


def select_indices(bundle: ModelBundle, cfg: TrainConfig, images, rps_rng=None):
    """Per-image selected patch indices for the bundle's method (no-grad)."""
    method = bundle.method
    grids = [tile(img, cfg.patch_size, cfg.stride) for img in images]
    n = grids[0].n_patches
    if method in ("ips_transformer", "ips_gated"):
        results = select_batch(grids, selection_config(cfg), bundle.encoder,
                               bundle.scorer)
        return [r.indices for r in results], results
    if method == "rps":
        m = min(cfg.buffer_size, n)
        return [random_select(n, m, rps_rng) for _ in images], None
    if method == "topmil":
        m = min(cfg.buffer_size, n)
        results = [topmil_select(g, m, bundle.encoder, bundle.heads) for g in grids]
        return [r.indices for r in results], results
    if method in ("deepmil", "deepmil_plus"):
        return [np.arange(n) for _ in images], None
    raise ContractError(f"method {method!r} has no patch selection stage")


def aggregate_logits(bundle: ModelBundle, cfg: TrainConfig, emb: Tensor,
                     pos: Tensor | None):
    """Method-specific aggregation of (B, M, D) embeddings."""
    method = bundle.method
    if method in ("ips_transformer", "rps"):
        pooled, attn = bundle.aggregator.transformer_forward(emb, pos)
        return bundle.heads(pooled), attn
    if method in ("ips_gated", "deepmil", "deepmil_plus"):
        x = ops.embedding_add(emb, pos) if pos is not None else emb
        pooled, attn = bundle.gated(x)
        return bundle.heads(pooled), attn
    if method == "topmil":
        x = ops.embedding_add(emb, pos) if pos is not None else emb
        logits = []
        for t in range(len(bundle.task_names)):
            per_patch = bundle.heads.per_patch(t, x)     # (B, M, C)
            logits.append(ops.mean_(per_patch, axis=1))  # averaged class logits
        return logits, None
    raise ContractError(f"method {method!r} does not aggregate patches")


def task_losses(bundle: ModelBundle, logits_list, labels: dict):
    loss = None
    for name, logits in zip(bundle.task_names, logits_list):
        if TASK_KIND[name] == "single":
            target = constant(onehot(labels[name], logits.shape[-1],
                                     dtype=logits.dtype), tracked=False)
            term = ops.softmax_cross_entropy(logits, target)
        else:
            target = constant(labels["multi"].astype(logits.dtype), tracked=False)
            term = ops.binary_cross_entropy_with_logits(logits, target)
        loss = term if loss is None else ops.add(loss, term)
    return loss


def accuracy_counts(bundle: ModelBundle, logits_list, labels: dict) -> dict:
    """Correct-prediction counts per task; multi-label is exact-match, with
    mean per-class correctness reported alongside."""
    counts = {}
    for name, logits in zip(bundle.task_names, logits_list):
        if TASK_KIND[name] == "single":
            pred = np.argmax(logits.data, axis=-1)
            counts[name] = float((pred == labels[name]).sum())
        else:
            pred_bits = logits.data > 0.0
            true_bits = labels["multi"] > 0.5
            counts[name] = float(np.all(pred_bits == true_bits, axis=-1).sum())
            counts["multi_per_class"] = float((pred_bits == true_bits).mean(axis=-1).sum())
    return counts


def train_phase(bundle: ModelBundle, cfg: TrainConfig, images, labels, indices):
    """Gradient/training-mode forward; returns (loss, logits, extras)."""
    if bundle.method == "cnn":
        x = Tensor(cnn_inputs(np.stack(images)), category="patch_pixels")
        pooled = bundle.encoder(x)
        logits_list = bundle.heads(pooled)
        return task_losses(bundle, logits_list, labels), logits_list, {}

    grids = [tile(img, cfg.patch_size, cfg.stride) for img in images]
    m = len(indices[0])
    blocks = [g.fetch_batch(idx) for g, idx in zip(grids, indices)]
    pixels = Tensor(np.concatenate(blocks, axis=0), category="patch_pixels")
    emb_flat = bundle.encoder.embed(pixels, grad=True)
    emb = ops.reshape(emb_flat, (len(images), m, emb_flat.shape[1]))
    pos = None
    if cfg.use_pos:
        rows = np.stack([positional_rows(idx, emb.shape[2]) for idx in indices])
        pos = constant(rows, tracked=False)
    logits_list, attn = aggregate_logits(bundle, cfg, emb, pos)
    loss = task_losses(bundle, logits_list, labels)

    extras = {}
    if bundle.readout is not None and attn is not None:
        weights = readout_attention(bundle, attn)            # (B, M), detached
        attn_t = constant(weights[..., None].astype(emb.dtype), tracked=False)
        _, image_logits = bundle.readout(emb.detach(), attn_t)
        target = constant(labels["multi"].astype(np.float32), tracked=False)
        readout_loss = ops.binary_cross_entropy_with_logits(image_logits, target)
        loss = ops.add(loss, readout_loss)
        extras["readout_attention"] = weights
    return loss, logits_list, extras
