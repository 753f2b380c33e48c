"""Training loop: per-step selection, gradient phase, optimizer update.

The tape must be empty at the top of every step (selection leaks nothing);
the ledger scope around the gradient phase releases activations and tape
after the update, so the recorded peak covers exactly one step's worth of
retained state. Two runs with the same config and seed produce
byte-identical checkpoints and metrics (timing columns aside).
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from ..data.megamnist import MegaMnistDataset
from ..errors import ContractError, NumericError
from ..grad import engine
from ..grad.ledger import MemoryLedger
from .config import TrainConfig, dump_config
from .evaluate import evaluate_bundle
from .metrics import MetricsRecord, write_metrics_csv
from .models import build_model
from .optim import AdamW
from .schedule import lr_at
from .steps import accuracy_counts, select_indices, train_phase


def train(cfg: TrainConfig):
    """Full training run; returns (history, run_dir, final test metrics)."""
    cfg.validate()
    if not cfg.dataset:
        raise ContractError("cfg.dataset must point to a generated dataset directory")
    dataset = MegaMnistDataset(cfg.dataset)
    train_split = dataset.split("train")
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")

    bundle = build_model(cfg)
    params = bundle.trainable_params()
    optimizer = AdamW(params, weight_decay=cfg.weight_decay)
    ledger = MemoryLedger(budget_bytes=cfg.ledger_budget or None)
    param_handle = ledger.alloc(bundle.param_bytes(), "parameters")

    shuffle_rng = bundle.streams.get("shuffle.train")
    rps_rng = bundle.streams.get("rps.train")
    count = train_split.count
    label_arrays = train_split.label_arrays()

    history: list[MetricsRecord] = []
    global_step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, epochs=cfg.epochs, base_lr=cfg.base_lr,
                   warmup_epochs=cfg.warmup_epochs, decay_factor=cfg.lr_decay_factor)
        order = shuffle_rng.permutation(count)
        step_times, select_times, train_times = [], [], []
        loss_sum = 0.0
        seen = 0
        correct: dict[str, float] = {}

        for start in range(0, count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images = [np.array(train_split.images[i], dtype=np.float32) for i in idx]
            labels = {name: label_arrays[name][idx] for name in label_arrays}

            if len(engine.tape()) != 0:
                raise ContractError("tape not empty at the top of a training step")
            t0 = time.perf_counter()
            try:
                with engine.use_ledger(ledger):
                    if bundle.method == "cnn":
                        indices = None
                    else:
                        indices, _ = select_indices(bundle, cfg, images, rps_rng)
                    t1 = time.perf_counter()
                    with ledger.scope(), engine.finite_checks(cfg.finite_checks):
                        loss, logits_list, _ = train_phase(bundle, cfg, images,
                                                           labels, indices)
                        loss_val = loss.item()
                        grads = engine.backward(loss, params=params)
                        optimizer.step(grads, lr)
                        engine.tape().clear()
                t2 = time.perf_counter()
            except NumericError as err:
                raise NumericError(
                    f"non-finite value at step {global_step} "
                    f"(epoch {epoch}): {err}", op=getattr(err, "op", None)) from err

            for name, val in accuracy_counts(bundle, logits_list, labels).items():
                correct[name] = correct.get(name, 0.0) + val
            loss_sum += loss_val * len(idx)
            seen += len(idx)
            select_times.append((t1 - t0) * 1e3)
            train_times.append((t2 - t1) * 1e3)
            step_times.append((t2 - t0) * 1e3)
            global_step += 1

        def trimmed_mean(xs):
            xs = xs[1:-1] if len(xs) > 2 else xs
            return float(np.mean(xs)) if xs else 0.0

        record = MetricsRecord(
            epoch=epoch, loss=loss_sum / max(seen, 1),
            accuracy={k: v / max(seen, 1) for k, v in correct.items()},
            wall_ms_step=trimmed_mean(step_times),
            wall_ms_select=trimmed_mean(select_times),
            wall_ms_train=trimmed_mean(train_times),
            ledger_peak_bytes=ledger.peak_total, lr=lr)
        history.append(record)
        write_metrics_csv(history, bundle.task_names, run_dir / "metrics.csv")

    checkpoint_path = run_dir / "checkpoint.bin"
    bundle.save(checkpoint_path)
    final_eval = evaluate_bundle(bundle, dataset.split("test"), cfg)
    eval_record = MetricsRecord(epoch=cfg.epochs, loss=final_eval.get("loss", 0.0),
                                accuracy=final_eval["accuracy"])
    write_metrics_csv([eval_record], bundle.task_names, run_dir / "final_eval.csv")
    ledger.free(param_handle)
    return history, run_dir, final_eval
