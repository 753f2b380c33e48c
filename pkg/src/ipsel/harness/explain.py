"""Attention maps and per-patch class read-outs for a single image.

Writes two artifacts: a 16-bit portable graymap (one cell per patch-grid
position, head/query-averaged attention scaled so the strongest selected
patch is white) and a CSV with one row per selected patch:
patch_index, row, col, argmax_class, score, attention.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..data.megamnist import MegaMnistDataset
from ..data.patches import tile
from ..data.posenc import positional_rows
from ..errors import ContractError
from ..grad import engine, ops
from ..grad.tensor import Tensor, constant
from .config import TrainConfig
from .models import build_model, readout_attention
from .steps import select_indices


def explain_image(cfg: TrainConfig, checkpoint_path, image_index: int,
                  out_prefix, split_name: str = "test") -> dict:
    if cfg.method == "cnn":
        raise ContractError("the CNN baseline has no patch attention to explain")
    dataset = MegaMnistDataset(cfg.dataset)
    split = dataset.split(split_name)
    if not 0 <= image_index < split.count:
        raise ContractError(f"image index {image_index} outside [0, {split.count})")
    bundle = build_model(cfg)
    bundle.load(checkpoint_path)

    image = np.array(split.images[image_index], dtype=np.float32)
    grid = tile(image, cfg.patch_size, cfg.stride)
    rps_rng = bundle.streams.fresh("rps.eval")
    with engine.no_grad(), engine.eval_mode():
        indices, _ = select_indices(bundle, cfg, [image], rps_rng)
        idx = indices[0]
        pixels = Tensor(grid.fetch_batch(idx), category="patch_pixels")
        emb_flat = bundle.encoder.embed(pixels, grad=False)
        emb = ops.reshape(emb_flat, (1, len(idx), emb_flat.shape[1]))
        pos = None
        if cfg.use_pos:
            pos = constant(positional_rows(idx, emb.shape[2])[None], tracked=False)
        if bundle.method in ("ips_transformer", "rps"):
            _, attn = bundle.aggregator.transformer_forward(emb, pos,
                                                            use_dropout=False)
        else:
            x = ops.embedding_add(emb, pos) if pos is not None else emb
            _, attn = bundle.gated(x)
        weights = readout_attention(bundle, attn)[0]          # (M,)

        if bundle.readout is not None:
            scores = bundle.readout.patch_scores(emb).data[0]     # (M, C)
        elif hasattr(bundle.heads, "task_head"):
            # no read-out head in the checkpoint: first task head per patch
            scores = bundle.heads.task_head(0, emb).data[0]
        else:
            scores = bundle.heads.heads[0](emb).data[0]

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    pgm_path = out_prefix.with_suffix(".pgm")
    csv_path = out_prefix.with_suffix(".csv")

    cell = np.zeros((grid.rows, grid.cols), dtype=np.uint16)
    peak = float(weights.max()) if weights.size else 1.0
    for k, patch_index in enumerate(idx):
        r, c = divmod(int(patch_index), grid.cols)
        cell[r, c] = np.uint16(round(65535.0 * float(weights[k]) / peak)) if peak > 0 else 0
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{grid.cols} {grid.rows}\n65535\n".encode("ascii"))
        fh.write(cell.astype(">u2").tobytes())

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_index", "row", "col", "argmax_class", "score",
                         "attention"])
        for k, patch_index in enumerate(idx):
            r, c = divmod(int(patch_index), grid.cols)
            cls = int(np.argmax(scores[k]))
            writer.writerow([int(patch_index), r, c, cls,
                             f"{float(scores[k, cls]):.6f}",
                             f"{float(weights[k]):.6f}"])
    return {"pgm": pgm_path, "csv": csv_path, "indices": idx, "attention": weights}
