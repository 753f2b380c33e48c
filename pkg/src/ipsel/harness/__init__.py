"""Training harness: configuration, optimizer, loops, benchmarks, CLI."""

from .bench import bench_point, bench_scaling, write_bench_csv
from .config import METHODS, TASK_NAMES, TrainConfig, resolve_config
from .evaluate import evaluate_bundle, evaluate_checkpoint
from .models import ModelBundle, build_model
from .optim import AdamW, optimizer_step
from .schedule import lr_at
from .train import train

__all__ = [
    "TrainConfig", "resolve_config", "METHODS", "TASK_NAMES",
    "lr_at", "AdamW", "optimizer_step",
    "ModelBundle", "build_model", "train",
    "evaluate_bundle", "evaluate_checkpoint",
    "bench_point", "bench_scaling", "write_bench_csv",
]
