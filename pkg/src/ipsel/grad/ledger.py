"""Deterministic byte ledger for device-resident data.

The ledger is the artifact's stand-in for accelerator memory: every tracked
tensor allocation adds its exact byte count to one category, every free
subtracts it, and the running peak over the event timeline is the number
benchmarks report. Because allocation and free points are explicit (scopes,
buffer eviction, tape clearing) the peak is a pure function of the executed
operation sequence, so repeated runs agree bit-for-bit.

Categories: patch_pixels, embeddings, activations, tape, parameters.
"""

from __future__ import annotations

from ..errors import LedgerBudgetExceeded

CATEGORIES = ("patch_pixels", "embeddings", "activations", "tape", "parameters")


class Allocation:
    """Handle for one tracked byte range; freeing twice is a no-op."""

    __slots__ = ("nbytes", "category", "live")

    def __init__(self, nbytes: int, category: str):
        self.nbytes = nbytes
        self.category = category
        self.live = True


class LedgerScope:
    """Collects allocations made while active and frees survivors on exit."""

    def __init__(self, ledger: "MemoryLedger"):
        self._ledger = ledger
        self._owned: list[Allocation] = []

    def adopt(self, handle: Allocation) -> None:
        self._owned.append(handle)

    def escape(self, handle) -> None:
        """Transfer ownership to the parent scope (or to nobody at top level).

        Accepts an Allocation or any object with a `_handle` attribute.
        """
        handle = getattr(handle, "_handle", handle)
        if handle is None:
            return
        try:
            self._owned.remove(handle)
        except ValueError:
            return
        parent = self._ledger._parent_scope(self)
        if parent is not None:
            parent.adopt(handle)

    def __enter__(self) -> "LedgerScope":
        self._ledger._push_scope(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._ledger._pop_scope(self)
        for handle in reversed(self._owned):
            self._ledger.free(handle)
        self._owned.clear()


class MemoryLedger:
    """Byte-accurate account of live tracked tensors, by category.

    `budget_bytes`, when set, turns the ledger into a hard cap: the
    allocation that would exceed it raises LedgerBudgetExceeded.
    """

    def __init__(self, budget_bytes: int | None = None, record_events: bool = False):
        self.live = {c: 0 for c in CATEGORIES}
        self.peak_total = 0
        self.peak_by_category = {c: 0 for c in CATEGORIES}
        self.budget_bytes = budget_bytes
        self.record_events = record_events
        self.events: list[tuple[str, str, int, int]] = []
        self.tape_entries = 0
        self._scopes: list[LedgerScope] = []

    # -- allocation ------------------------------------------------------

    def alloc(self, nbytes: int, category: str) -> Allocation:
        if category not in self.live:
            raise KeyError(f"unknown ledger category: {category}")
        handle = Allocation(int(nbytes), category)
        self.live[category] += handle.nbytes
        total = self.total_live()
        if total > self.peak_total:
            self.peak_total = total
        if self.live[category] > self.peak_by_category[category]:
            self.peak_by_category[category] = self.live[category]
        if self.record_events:
            self.events.append(("alloc", category, handle.nbytes, total))
        if self._scopes:
            self._scopes[-1].adopt(handle)
        if self.budget_bytes is not None and total > self.budget_bytes:
            raise LedgerBudgetExceeded(
                f"ledger budget of {self.budget_bytes} bytes exceeded "
                f"(live {total} bytes)",
                peak_bytes=self.peak_total,
            )
        return handle

    def free(self, handle) -> None:
        handle = getattr(handle, "_handle", handle)
        if handle is None or not handle.live:
            return
        handle.live = False
        self.live[handle.category] -= handle.nbytes
        if self.record_events:
            self.events.append(("free", handle.category, handle.nbytes, self.total_live()))

    # -- tape accounting ---------------------------------------------------

    TAPE_ENTRY_OVERHEAD = 64

    def tape_alloc(self, aux_nbytes: int) -> int:
        nbytes = self.TAPE_ENTRY_OVERHEAD + int(aux_nbytes)
        self.live["tape"] += nbytes
        self.tape_entries += 1
        total = self.total_live()
        if total > self.peak_total:
            self.peak_total = total
        if self.live["tape"] > self.peak_by_category["tape"]:
            self.peak_by_category["tape"] = self.live["tape"]
        if self.record_events:
            self.events.append(("alloc", "tape", nbytes, total))
        if self.budget_bytes is not None and total > self.budget_bytes:
            raise LedgerBudgetExceeded(
                f"ledger budget of {self.budget_bytes} bytes exceeded "
                f"(live {total} bytes)",
                peak_bytes=self.peak_total,
            )
        return nbytes

    def tape_free(self, nbytes: int) -> None:
        self.live["tape"] -= int(nbytes)
        self.tape_entries -= 1
        if self.record_events:
            self.events.append(("free", "tape", int(nbytes), self.total_live()))

    # -- scopes and reporting ---------------------------------------------

    def scope(self) -> LedgerScope:
        return LedgerScope(self)

    def _push_scope(self, scope: LedgerScope) -> None:
        self._scopes.append(scope)

    def _pop_scope(self, scope: LedgerScope) -> None:
        if not self._scopes or self._scopes[-1] is not scope:
            raise RuntimeError("ledger scopes must exit in LIFO order")
        self._scopes.pop()

    def _parent_scope(self, scope: LedgerScope) -> LedgerScope | None:
        try:
            i = self._scopes.index(scope)
        except ValueError:
            return None
        return self._scopes[i - 1] if i > 0 else None

    def total_live(self) -> int:
        return sum(self.live.values())

    def snapshot(self) -> dict:
        return {
            "peak_total": self.peak_total,
            "peak_by_category": dict(self.peak_by_category),
            "live": dict(self.live),
        }
