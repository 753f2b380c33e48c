"""Finite-difference verification of the reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from . import engine


def check_gradients(f, params, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` is a nullary callable returning a scalar Tensor, closed over
    `params` (a list of Tensors, normally f64 copies of the network). The
    relative error for each coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).

    Stochastic layers must be disabled (dropout rate 0) so that f is a
    deterministic function of the parameters.
    """
    with engine.fresh_tape() as tape:
        loss = f()
        grads = engine.backward(loss, params=params)
        tape.clear()
    analytic = {id(p): grads[p].data.copy() for p in params}

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        a_flat = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with engine.no_grad(), engine.fresh_tape():
                hi = f().item()
            flat[i] = orig - step
            with engine.no_grad(), engine.fresh_tape():
                lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(
                    f"non-finite loss while perturbing {p.name or 'parameter'}[{i}]")
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-12)
            err = abs(a_flat[i] - numeric) / denom
            if err > worst:
                worst = err
    return float(worst)
