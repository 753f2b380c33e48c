"""Learning-rate schedule: linear warmup into a cosine decay."""

from __future__ import annotations

import math

from ..errors import ContractError


def lr_at(epoch: int, *, epochs: int, base_lr: float, warmup_epochs: int,
          decay_factor: float = 1000.0) -> float:
    """Rate for `epoch` in [0, epochs).

    Ramps linearly 0 -> base_lr over the first `warmup_epochs` epochs, then
    follows a cosine from base_lr down to base_lr / decay_factor at the
    final epoch.
    """
    if not 0 <= epoch < epochs:
        raise ContractError(f"epoch {epoch} outside [0, {epochs})")
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    end_lr = base_lr / decay_factor
    span = (epochs - 1) - warmup_epochs
    if span <= 0:
        return end_lr if epoch == epochs - 1 else base_lr
    t = (epoch - warmup_epochs) / span
    return end_lr + 0.5 * (base_lr - end_lr) * (1.0 + math.cos(math.pi * t))
