"""1D sinusoidal positional encoding."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ContractError


@lru_cache(maxsize=32)
def _inv_freq(dim: int) -> np.ndarray:
    i = np.arange(dim // 2, dtype=np.float64)
    return 1.0 / np.power(10000.0, 2.0 * i / dim)


def positional_rows(positions, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal rows for arbitrary integer positions.

    Row p holds sin(p / 10000^(2i/dim)) and cos(p / 10000^(2i/dim)) in
    columns 2i and 2i+1. `dim` must be even. Computing rows on demand (as
    opposed to materializing an N-row table) keeps lazy-loading memory
    independent of the patch count.
    """
    if dim % 2 != 0:
        raise ContractError(f"positional encoding dimension must be even, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    angles = positions * _inv_freq(dim)[None, :]
    table = np.empty((positions.shape[0], dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(dtype)


def positional_encoding(count: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Rows 0..count-1 of the sinusoidal table."""
    return positional_rows(np.arange(count), dim, dtype=dtype)
