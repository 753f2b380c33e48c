"""Gradient tape, mode state, and reverse-mode backward pass.

The engine keeps one process-wide state: whether gradients are being
recorded, whether the network is in training mode (dropout sampling,
batch-norm statistic source), the active tape, and the active memory
ledger. Forward/backward on a tape is single-threaded by contract;
parallel evaluation across independent inputs must give each worker its
own process.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, ModeError, NumericError


class TapeEntry:
    """One recorded primitive: output, inputs, and its backward rule.

    `backward_fn(grad_out, accumulate)` distributes grad_out to the entry's
    inputs by calling accumulate(input_tensor, partial_grad). `aux_nbytes`
    is the size of any arrays the rule captured beyond inputs/output
    (dropout masks, normalization caches); the ledger charges them to the
    tape category for as long as the entry lives.
    """

    __slots__ = ("op", "output", "inputs", "backward_fn", "ledger_nbytes")

    def __init__(self, op, output, inputs, backward_fn, ledger_nbytes):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.ledger_nbytes = ledger_nbytes


class Tape:
    """Topologically ordered record of differentiable primitives."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op, output, inputs, backward_fn, aux_nbytes=0) -> None:
        ledger = current_ledger()
        nbytes = 0
        if ledger is not None:
            nbytes = ledger.tape_alloc(aux_nbytes)
        self.entries.append(TapeEntry(op, output, inputs, backward_fn, nbytes))

    def clear(self) -> None:
        ledger = current_ledger()
        if ledger is not None:
            for entry in self.entries:
                ledger.tape_free(entry.ledger_nbytes)
        self.entries.clear()


class _State:
    def __init__(self):
        self.grad_enabled = True
        self.training = True
        self.tape = Tape()
        self.ledgers = []
        self.check_finite = False


_state = _State()


# -- state queries ----------------------------------------------------------

def grad_enabled() -> bool:
    return _state.grad_enabled


def is_training() -> bool:
    return _state.training


def tape() -> Tape:
    return _state.tape


def current_ledger():
    return _state.ledgers[-1] if _state.ledgers else None


def finite_checks_enabled() -> bool:
    return _state.check_finite


# -- scopes ------------------------------------------------------------------

@contextmanager
def no_grad():
    """Disable tape recording; nesting is idempotent."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def grad_mode(enabled: bool = True):
    prev = _state.grad_enabled
    _state.grad_enabled = bool(enabled)
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def eval_mode():
    prev = _state.training
    _state.training = False
    try:
        yield
    finally:
        _state.training = prev


@contextmanager
def train_mode(flag: bool = True):
    prev = _state.training
    _state.training = bool(flag)
    try:
        yield
    finally:
        _state.training = prev


@contextmanager
def use_ledger(ledger):
    _state.ledgers.append(ledger)
    try:
        yield ledger
    finally:
        _state.ledgers.pop()


@contextmanager
def fresh_tape():
    """Swap in an empty tape; restores the previous one on exit."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


@contextmanager
def finite_checks(enabled: bool = True):
    prev = _state.check_finite
    _state.check_finite = bool(enabled)
    try:
        yield
    finally:
        _state.check_finite = prev


def no_grad_scope(f, *args, **kwargs):
    """Run f with recording disabled and return its result."""
    with no_grad():
        return f(*args, **kwargs)


# -- backward ----------------------------------------------------------------

def backward(loss, params=None):
    """Reverse-mode gradients of a scalar loss.

    Returns a dict mapping each requires_grad leaf reached from `loss`
    (plus every tensor in `params`, with zeros when unreached) to its
    gradient Tensor. The tape is left intact; call tape().clear() after
    the optimizer step.
    """
    from .tensor import Tensor

    if not _state.grad_enabled:
        raise ModeError("backward called inside a no-gradient scope")
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("backward called on a non-finite loss", op="backward")

    grads: dict[int, np.ndarray] = {}
    grads[id(loss)] = np.ones_like(loss.data)
    produced = {id(e.output) for e in _state.tape.entries}
    leaves: dict[int, object] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    def accumulate(t, g):
        # Partials from backward rules are fresh arrays and never mutated
        # after being handed over, so no defensive copy is needed.
        if not (t.requires_grad or id(t) in produced):
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
        if t.requires_grad and key not in produced:
            leaves[key] = t

    for entry in reversed(_state.tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        entry.backward_fn(g, accumulate)

    result = {}
    for key, t in leaves.items():
        result[t] = Tensor(grads[key], requires_grad=False)
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = Tensor(np.zeros_like(p.data), requires_grad=False)
    return result
