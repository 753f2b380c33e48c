"""Streaming top-M patch selection.

The loop embeds patches a chunk at a time in no-gradient evaluation mode,
scores them with the shared cross-attention logits, and keeps the M
best-scoring patches seen so far. Because per-patch logits are
deterministic and independent of chunk composition in eval mode, buffered
entries cache their logit instead of being rescored each iteration; a test
hook (`rescore_buffer`) re-scores literally every iteration so the
equivalence is checkable.

Loading strategies differ only in which pixels the ledger tags as
device-resident:

  eager            all images of the batch, advancing chunks in lockstep
  eager_sequential one image at a time, run to completion
  lazy             only the current chunk's pixels (images stay untracked)

All three produce identical selected index sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data.patches import PatchGrid
from ..data.posenc import positional_rows
from ..errors import ContractError, ModeError
from ..grad import engine
from ..grad.tensor import Tensor

LOADINGS = ("eager", "eager_sequential", "lazy")


@dataclass
class SelectionConfig:
    buffer_size: int                 # M, patches kept
    chunk_size: int                  # I, patches embedded per iteration
    loading: str = "lazy"
    tie_rule: str = "lower_index"
    use_pos: bool = True
    rescore_buffer: bool = False     # literal per-iteration rescoring (slow)

    def __post_init__(self):
        if self.buffer_size < 1 or self.chunk_size < 1:
            raise ContractError(
                f"buffer_size and chunk_size must be >= 1, got "
                f"{self.buffer_size}, {self.chunk_size}")
        if self.loading not in LOADINGS:
            raise ContractError(f"unknown loading strategy {self.loading!r}")
        if self.tie_rule != "lower_index":
            raise ContractError(f"unsupported tie rule {self.tie_rule!r}")


@dataclass
class SelectionResult:
    indices: np.ndarray              # ascending patch indices, length min(M, N)
    iterations: int                  # T = ceil((N - M) / I), 0 when N <= M
    encoder_eval_calls: int          # patches embedded during selection
    ledger_peak: dict = field(default_factory=dict)


class SelectionBuffer:
    """Top-M store: indices, embeddings, and cached score logits."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        self.capacity = capacity
        self.indices = np.empty(0, dtype=np.int64)
        self.embeddings = np.empty((0, dim), dtype=dtype)
        self.logits = np.empty(0, dtype=dtype)

    def fill(self, indices, embeddings, logits) -> None:
        self.indices = np.asarray(indices, dtype=np.int64)
        self.embeddings = embeddings
        self.logits = logits


def topm_union(buf_indices, buf_logits, chunk_indices, chunk_logits, m):
    """Positions (into the union) of the top-m entries.

    Order: higher logit first; equal logits resolved toward the lower
    patch index. Matches a full sort-then-truncate oracle exactly.
    """
    union_idx = np.concatenate([buf_indices, chunk_indices])
    if len(np.unique(union_idx)) != union_idx.size:
        raise ContractError("duplicate patch index in top-M union")
    union_logits = np.concatenate([buf_logits, chunk_logits])
    order = np.lexsort((union_idx, -union_logits))
    return union_idx, union_logits, order[: min(m, union_idx.size)]


def score_patches(embeddings, scorer) -> np.ndarray:
    """Per-patch selection logits for (K, D) position-encoded embeddings."""
    if engine.grad_enabled():
        raise ModeError("score_patches must run inside a no-gradient scope")
    data = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    return scorer.selection_logits(data)


def _chunk_bounds(n, m, i):
    starts = list(range(min(m, n), n, i))
    return [(s, min(s + i, n)) for s in starts]


def _embed_and_score(grids, lo, hi, encoder, score_fn, use_pos, track_pixels):
    """Embed patches [lo, hi) of every grid in one batched call.

    Returns (per-grid embeddings view, per-grid logits). Allocation order
    is fixed: chunk pixels, embeddings, scoring input.
    """
    count = hi - lo
    idx = np.arange(lo, hi)
    blocks = [g.fetch_batch(idx) for g in grids]
    pixels = Tensor(np.concatenate(blocks, axis=0) if len(blocks) > 1 else blocks[0],
                    tracked=track_pixels, category="patch_pixels")
    emb = encoder.embed(pixels, grad=False)          # (B*K, D)
    if use_pos:
        pos = positional_rows(idx, emb.shape[1], dtype=emb.dtype)
        scored_in = Tensor(
            emb.data.reshape(len(grids), count, -1) + pos[None],
            category="activations")
    else:
        scored_in = Tensor(emb.data.reshape(len(grids), count, -1).copy(),
                           category="activations")
    logits = [score_fn(scored_in.data[b]) for b in range(len(grids))]
    embs = [emb.data[b * count : (b + 1) * count] for b in range(len(grids))]
    return embs, logits


def _select_lockstep(grids, cfg: SelectionConfig, encoder, scorer,
                     track_pixels: bool) -> list[SelectionResult]:
    """Shared lockstep loop used by eager and lazy loading."""
    n = grids[0].n_patches
    for g in grids[1:]:
        if g.n_patches != n or g.patch_size != grids[0].patch_size:
            raise ContractError(
                "lockstep selection requires a uniform patch grid across the "
                "batch; use eager_sequential for varying lengths")
    m0 = min(cfg.buffer_size, n)
    dim = encoder.feature_dim
    ledger = engine.current_ledger()
    calls = [0] * len(grids)

    buffers = []
    buf_handle = None
    if ledger is not None:
        buf_handle = ledger.alloc(len(grids) * m0 * dim * np.dtype(encoder.dtype).itemsize,
                                  "embeddings")
    scope = ledger.scope() if ledger is not None else None
    try:
        if scope is not None:
            scope.__enter__()
        with engine.no_grad(), engine.eval_mode():
            score_fn = scorer.prepare_selection() \
                if hasattr(scorer, "prepare_selection") else scorer.selection_logits

            def run_chunk(lo, hi):
                if ledger is not None:
                    with ledger.scope():
                        return _embed_and_score(grids, lo, hi, encoder, score_fn,
                                                cfg.use_pos, track_pixels)
                return _embed_and_score(grids, lo, hi, encoder, score_fn,
                                        cfg.use_pos, track_pixels)

            embs, logits = run_chunk(0, m0)
            for b in range(len(grids)):
                buf = SelectionBuffer(m0, dim, dtype=encoder.dtype)
                buf.fill(np.arange(m0), embs[b].copy(), logits[b].copy())
                buffers.append(buf)
                calls[b] += m0

            iterations = 0
            for lo, hi in _chunk_bounds(n, m0, cfg.chunk_size):
                embs, logits = run_chunk(lo, hi)
                iterations += 1
                chunk_idx = np.arange(lo, hi)
                for b, buf in enumerate(buffers):
                    calls[b] += hi - lo
                    buf_logits = buf.logits
                    if cfg.rescore_buffer:
                        pos = positional_rows(buf.indices, dim, dtype=encoder.dtype) \
                            if cfg.use_pos else 0.0
                        buf_logits = score_fn(buf.embeddings + pos)
                    union_idx, union_logits, keep = topm_union(
                        buf.indices, buf_logits, chunk_idx, logits[b],
                        cfg.buffer_size)
                    union_emb = np.concatenate([buf.embeddings, embs[b]], axis=0)
                    buf.fill(union_idx[keep], union_emb[keep].copy(),
                             union_logits[keep].copy())
    finally:
        if scope is not None:
            scope.__exit__(None, None, None)
        if ledger is not None:
            ledger.free(buf_handle)

    results = []
    for b, buf in enumerate(buffers):
        order = np.argsort(buf.indices)
        results.append(SelectionResult(
            indices=buf.indices[order],
            iterations=iterations,
            encoder_eval_calls=calls[b],
            ledger_peak=ledger.snapshot() if ledger is not None else {}))
    return results


def iterative_select(grid: PatchGrid, cfg: SelectionConfig, encoder, scorer,
                     track_pixels: bool = False) -> SelectionResult:
    """Select top-M patches of one image; runs wholly in no-grad eval mode."""
    return _select_lockstep([grid], cfg, encoder, scorer, track_pixels)[0]


def select_batch(grids, cfg: SelectionConfig, encoder, scorer) -> list[SelectionResult]:
    """Selection over a batch of grids under the configured loading strategy.

    Ledger semantics: eager tags every image's pixels for the whole call;
    eager_sequential tags one image at a time; lazy tags only each chunk's
    gathered pixels. Selected indices are identical across strategies.
    """
    grids = list(grids)
    if not grids:
        return []
    ledger = engine.current_ledger()

    if cfg.loading == "eager":
        n0, p0 = grids[0].n_patches, grids[0].patch_size
        for g in grids[1:]:
            if g.n_patches != n0 or g.patch_size != p0:
                raise ContractError(
                    "eager loading requires a uniform patch count across the "
                    "batch; use eager_sequential for varying lengths")
        handles = []
        if ledger is not None:
            for g in grids:
                handles.append(ledger.alloc(g.image.nbytes, "patch_pixels"))
        try:
            return _select_lockstep(grids, cfg, encoder, scorer, track_pixels=True)
        finally:
            for h in handles:
                ledger.free(h)

    if cfg.loading == "eager_sequential":
        results = []
        for g in grids:
            handle = ledger.alloc(g.image.nbytes, "patch_pixels") if ledger else None
            try:
                results.append(_select_lockstep([g], cfg, encoder, scorer,
                                                track_pixels=True)[0])
            finally:
                if handle is not None:
                    ledger.free(handle)
        return results

    # lazy: images stay host-resident; only chunk pixels are device-tagged.
    uniform = all(g.n_patches == grids[0].n_patches and
                  g.patch_size == grids[0].patch_size for g in grids)
    if uniform:
        return _select_lockstep(grids, cfg, encoder, scorer, track_pixels=True)
    return [_select_lockstep([g], cfg, encoder, scorer, track_pixels=True)[0]
            for g in grids]
