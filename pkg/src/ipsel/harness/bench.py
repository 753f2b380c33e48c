"""Benchmark sweeps: ledger peaks and phase timings per configuration.

Each sweep point trains a fresh model (same seed) for a fixed number of
steps on a fixed batch cycle and records the ledger peak (total and per
category), the selection-phase and training-phase wall times (mean over
all but the first and last step), the iteration count T, and the number
of encoder evaluation calls during selection. Byte columns are exact and
reproducible run-to-run; wall-clock columns are not.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from ..data.megamnist import MegaMnistDataset
from ..errors import ContractError
from ..grad import engine
from ..grad.ledger import CATEGORIES, MemoryLedger
from .config import TrainConfig
from .models import build_model
from .optim import AdamW
from .steps import select_indices, train_phase

BENCH_COLUMNS = (
    ["image_side", "N", "M", "I", "loading", "peak_bytes_total"]
    + [f"peak_bytes_{c}" for c in CATEGORIES]
    + ["wall_ms_select", "wall_ms_train_step", "encoder_eval_calls", "T"]
)


def bench_point(cfg: TrainConfig, steps: int | None = None) -> dict:
    """Run `steps` training steps and report the spec'd benchmark row."""
    cfg.validate()
    steps = steps or cfg.bench_steps
    dataset = MegaMnistDataset(cfg.dataset)
    split = dataset.split("train")
    side = split.side
    n_patches = ((side - cfg.patch_size) // cfg.stride + 1) ** 2

    bundle = build_model(cfg)
    params = bundle.trainable_params()
    optimizer = AdamW(params, weight_decay=cfg.weight_decay)
    ledger = MemoryLedger(budget_bytes=cfg.ledger_budget or None)
    ledger.alloc(bundle.param_bytes(), "parameters")
    rps_rng = bundle.streams.get("rps.train")
    label_arrays = split.label_arrays()

    batch = min(cfg.batch_size, split.count)
    idx = np.arange(batch)
    images = [np.array(split.images[i], dtype=np.float32) for i in idx]
    labels = {name: label_arrays[name][idx] for name in label_arrays}

    select_ms, train_ms = [], []
    eval_calls = 0
    iterations = 0
    for _ in range(steps):
        t0 = time.perf_counter()
        with engine.use_ledger(ledger):
            if bundle.method == "cnn":
                indices, results = None, None
            else:
                indices, results = select_indices(bundle, cfg, images, rps_rng)
            t1 = time.perf_counter()
            with ledger.scope(), engine.finite_checks(cfg.finite_checks):
                loss, _, _ = train_phase(bundle, cfg, images, labels, indices)
                grads = engine.backward(loss, params=params)
                optimizer.step(grads, lr=cfg.base_lr)
                engine.tape().clear()
        t2 = time.perf_counter()
        select_ms.append((t1 - t0) * 1e3)
        train_ms.append((t2 - t1) * 1e3)
        if results:
            eval_calls = int(results[0].encoder_eval_calls)
            iterations = int(results[0].iterations)

    def trimmed(xs):
        xs = xs[1:-1] if len(xs) > 2 else xs
        return float(np.mean(xs)) if xs else 0.0

    row = {
        "image_side": side,
        "N": n_patches,
        "M": cfg.buffer_size,
        "I": cfg.chunk_size,
        "loading": cfg.loading if bundle.method != "cnn" else "none",
        "peak_bytes_total": ledger.peak_total,
        "wall_ms_select": f"{trimmed(select_ms):.3f}",
        "wall_ms_train_step": f"{trimmed(train_ms):.3f}",
        "encoder_eval_calls": eval_calls,
        "T": iterations,
    }
    for cat in CATEGORIES:
        row[f"peak_bytes_{cat}"] = ledger.peak_by_category[cat]
    return row


def bench_scaling(base_cfg: TrainConfig, sweep: str, points, steps=None) -> list[dict]:
    """Sweep one axis and collect one row per point.

    sweep = 'image_sides': points are dataset directories (one per side);
    sweep = 'mi_grid':     points are (M, I) pairs on base_cfg.dataset;
    sweep = 'patch_sizes': points are patch sizes on base_cfg.dataset.
    """
    import dataclasses

    rows = []
    for point in points:
        cfg = dataclasses.replace(base_cfg)
        if sweep == "image_sides":
            cfg.dataset = str(point)
        elif sweep == "mi_grid":
            cfg.buffer_size, cfg.chunk_size = int(point[0]), int(point[1])
        elif sweep == "patch_sizes":
            cfg.patch_size = int(point)
            cfg.patch_stride = 0
        else:
            raise ContractError(f"unknown sweep kind {sweep!r}")
        rows.append(bench_point(cfg, steps=steps))
    return rows


def write_bench_csv(rows, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def bench_rows_without_timing(path) -> list[dict]:
    """Rows with wall-clock columns dropped (the reproducible part)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row.pop("wall_ms_select", None)
        row.pop("wall_ms_train_step", None)
    return rows
