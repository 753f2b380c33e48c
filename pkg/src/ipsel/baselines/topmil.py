"""Top-logit MIL baseline.

All patches are scored in one no-gradient pass by the maximum class logit
(over every task head); the top M are re-embedded in gradient/training
mode, classified per patch, and the class logits averaged. Unlike the
iterative loop this stores every patch embedding at once, which is exactly
the memory behaviour the benchmarks are meant to expose.
"""

from __future__ import annotations

import numpy as np

from ..data.patches import PatchGrid
from ..errors import ContractError
from ..grad import engine
from ..grad.tensor import Tensor
from ..selection.core import SelectionResult, topm_union


def topmil_select(grid: PatchGrid, m: int, encoder, heads) -> SelectionResult:
    """Indices of the M patches with the highest max class logit."""
    if m > grid.n_patches:
        raise ContractError(f"M={m} exceeds patch count N={grid.n_patches}")
    n = grid.n_patches
    ledger = engine.current_ledger()
    scope = ledger.scope() if ledger is not None else None
    try:
        if scope is not None:
            scope.__enter__()
        with engine.no_grad(), engine.eval_mode():
            pixels = Tensor(grid.fetch_batch(np.arange(n)), category="patch_pixels")
            emb = encoder.embed(pixels, grad=False)               # (N, D)
            scores = heads.max_logit(emb.data)                    # (N,)
    finally:
        if scope is not None:
            scope.__exit__(None, None, None)
    empty = np.empty(0, dtype=np.int64)
    _, _, keep = topm_union(empty, np.empty(0, dtype=scores.dtype),
                            np.arange(n), scores, m)
    indices = np.sort(np.arange(n)[keep])
    return SelectionResult(indices=indices, iterations=1, encoder_eval_calls=n,
                           ledger_peak=ledger.snapshot() if ledger else {})
