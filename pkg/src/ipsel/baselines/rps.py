"""Random patch selection: uniform without replacement, seeded streams."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


def random_select(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """M distinct indices out of N, ascending; deterministic per stream state."""
    if m > n:
        raise ContractError(f"random_select: M={m} exceeds N={n}")
    picked = rng.choice(n, size=m, replace=False)
    return np.sort(picked.astype(np.int64))
