"""Evaluation: eval-mode forward passes, per-task accuracy, no tape."""

from __future__ import annotations

import numpy as np

from ..baselines.cnn import cnn_inputs
from ..data.megamnist import MegaMnistDataset
from ..data.patches import tile
from ..data.posenc import positional_rows
from ..errors import ContractError
from ..grad import engine, ops
from ..grad.tensor import Tensor, constant
from .config import TrainConfig
from .models import ModelBundle, build_model
from .steps import accuracy_counts, aggregate_logits, select_indices


def _eval_logits(bundle: ModelBundle, cfg: TrainConfig, images, rps_rng):
    if bundle.method == "cnn":
        x = Tensor(cnn_inputs(np.stack(images)), category="patch_pixels")
        pooled = bundle.encoder.embed(x, grad=False)
        return bundle.heads(pooled)

    indices, _ = select_indices(bundle, cfg, images, rps_rng)
    grids = [tile(img, cfg.patch_size, cfg.stride) for img in images]
    blocks = [g.fetch_batch(idx) for g, idx in zip(grids, indices)]
    pixels = Tensor(np.concatenate(blocks, axis=0), category="patch_pixels")
    emb_flat = bundle.encoder.embed(pixels, grad=False)
    m = len(indices[0])
    emb = ops.reshape(emb_flat, (len(images), m, emb_flat.shape[1]))
    pos = None
    if cfg.use_pos:
        rows = np.stack([positional_rows(idx, emb.shape[2]) for idx in indices])
        pos = constant(rows, tracked=False)
    logits_list, _ = aggregate_logits(bundle, cfg, emb, pos)
    return logits_list


def evaluate_bundle(bundle: ModelBundle, split, cfg: TrainConfig) -> dict:
    """Accuracy per task over a dataset split, deterministically.

    Runs in no-gradient evaluation mode throughout; repeated calls return
    identical metrics (random-selection baselines draw from a fresh stream
    seeded by (seed, 'rps.eval') on every call).
    """
    label_arrays = split.label_arrays()
    rps_rng = bundle.streams.fresh("rps.eval")
    correct: dict[str, float] = {}
    seen = 0
    tape_len_before = len(engine.tape())
    with engine.no_grad(), engine.eval_mode():
        for start in range(0, split.count, cfg.eval_batch):
            idx = np.arange(start, min(start + cfg.eval_batch, split.count))
            images = [np.array(split.images[i], dtype=np.float32) for i in idx]
            labels = {name: label_arrays[name][idx] for name in label_arrays}
            logits_list = _eval_logits(bundle, cfg, images, rps_rng)
            for name, val in accuracy_counts(bundle, logits_list, labels).items():
                correct[name] = correct.get(name, 0.0) + val
            seen += len(idx)
    if len(engine.tape()) != tape_len_before:
        raise ContractError("evaluation must not record tape entries")
    return {
        "accuracy": {k: v / max(seen, 1) for k, v in correct.items()},
        "count": seen,
    }


def evaluate_checkpoint(cfg: TrainConfig, checkpoint_path, split_name: str = "test") -> dict:
    """Rebuild the architecture from config, load weights, evaluate."""
    dataset = MegaMnistDataset(cfg.dataset)
    bundle = build_model(cfg)
    bundle.load(checkpoint_path)
    return evaluate_bundle(bundle, dataset.split(split_name), cfg)
