"""Dense n-dimensional array participating in reverse-mode differentiation.

A Tensor wraps a numpy array (f32 by default, f64 for verification work)
together with a requires_grad flag, a device-residency tag for the memory
ledger, and an optional name used by checkpoints.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from . import engine

F32 = np.float32
F64 = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    __slots__ = ("data", "requires_grad", "tracked", "category", "name", "_handle")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        tracked: bool = True,
        category: str = "activations",
        name: str | None = None,
        dtype=None,
    ):
        if isinstance(data, Tensor):
            raise ContractError("Tensor(data) expects an array, not a Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(F32)
        self.data = arr
        # Tensors born inside a no-gradient scope never require gradients.
        self.requires_grad = bool(requires_grad) and engine.grad_enabled()
        self.tracked = bool(tracked)
        self.category = category
        self.name = name
        self._handle = None
        if self.tracked:
            ledger = engine.current_ledger()
            if ledger is not None:
                self._handle = ledger.alloc(arr.nbytes, category)

    # -- inspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same buffer, no gradient, no ledger double-count."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.tracked = False
        t.category = self.category
        t.name = self.name
        t._handle = None
        return t

    def __repr__(self) -> str:
        tag = "tracked" if self.tracked else "untracked"
        grad = ", grad" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, {self.dtype}, {tag}{grad}{name})"


def parameter(data, name: str, dtype=F32) -> Tensor:
    """A trainable leaf tensor, always device-tagged under 'parameters'."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True,
                  tracked=True, category="parameters", name=name)


def constant(data, dtype=None, category: str = "activations", tracked: bool = True) -> Tensor:
    """A non-trainable tensor (labels, positional tables, masks)."""
    return Tensor(data, requires_grad=False, tracked=tracked,
                  category=category, dtype=dtype)
