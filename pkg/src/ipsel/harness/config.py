"""Run configuration: defaults, config files, environment, CLI overrides.

Config files are flat UTF-8 ``key = value`` lines ('#' starts a comment).
Keys must match TrainConfig fields exactly; unknown keys fail loudly.
Precedence, lowest to highest: dataclass defaults, config file, IPS_*
environment variables, explicit CLI flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..errors import ContractError

METHODS = ("ips_transformer", "ips_gated", "deepmil", "deepmil_plus",
           "topmil", "rps", "cnn")
TASK_NAMES = ("majority", "max_digit", "top", "multi")
ENV_PREFIX = "IPS_"


@dataclass
class TrainConfig:
    method: str = "ips_transformer"
    dataset: str = ""
    out_dir: str = "runs/latest"
    # optimization (defaults follow the desk-scale 30-epoch horizon; the
    # warmup keeps the published 10/150 shape)
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 2
    lr_decay_factor: float = 1000.0
    seed: int = 0
    # selection
    buffer_size: int = 100          # M
    chunk_size: int = 100           # I
    loading: str = "lazy"
    patch_size: int = 50
    patch_stride: int = 0           # 0 -> equal to patch_size (no overlap)
    use_pos: bool = True
    # architecture
    encoder_channels: int = 64      # first residual block width; D = 2x this
    heads: int = 8
    mlp_ratio: int = 4
    dropout: float = 0.1
    attn_dropout: float = 0.1
    head_hidden: int = 128          # MIL baseline / read-out hidden width
    gated_hidden: int = 128         # D_h (1024 for deepmil_plus)
    readout: bool = False
    # run control
    tasks: str = "majority,max_digit,top,multi"
    ledger_budget: int = 0          # bytes; 0 disables the cap
    eval_batch: int = 16
    bench_steps: int = 20
    finite_checks: bool = True

    @property
    def stride(self) -> int:
        return self.patch_stride if self.patch_stride > 0 else self.patch_size

    @property
    def feature_dim(self) -> int:
        return 2 * self.encoder_channels

    def task_list(self) -> list[str]:
        names = [t.strip() for t in self.tasks.split(",") if t.strip()]
        for t in names:
            if t not in TASK_NAMES:
                raise ContractError(f"unknown task {t!r}; known: {TASK_NAMES}")
        if not names:
            raise ContractError("at least one task is required")
        return names

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; known: {METHODS}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ContractError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be positive")
        if self.buffer_size < 1 or self.chunk_size < 1:
            raise ContractError("buffer_size and chunk_size must be >= 1")
        self.task_list()
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    field = _FIELDS[name]
    text = raw.strip()
    if field.type in ("int", int):
        return int(text)
    if field.type in ("float", float):
        return float(text)
    if field.type in ("bool", bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"config key {name}: expected a boolean, got {raw!r}")
    return text


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ContractError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ContractError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def env_overrides(environ) -> dict:
    values = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in _FIELDS:
            values[name] = _parse_value(name, raw)
    return values


def resolve_config(file_path=None, environ=None, overrides=None) -> TrainConfig:
    values: dict = {}
    if file_path:
        values.update(parse_config_file(file_path))
    if environ is not None:
        values.update(env_overrides(environ))
    if overrides:
        for key in overrides:
            if key not in _FIELDS:
                raise ContractError(f"unknown config key {key!r}")
        values.update(overrides)
    return TrainConfig(**values).validate()


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"
