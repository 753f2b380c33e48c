"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError


def optimizer_step(params, grads, lr: float, weight_decay: float, state: dict) -> dict:
    """One update, in place on the parameter tensors.

    Bias-corrected first/second moments (beta1=0.9, beta2=0.999, eps=1e-8);
    the decay term p <- p - lr * wd * p is applied separately from the
    gradient term, so zero gradients with wd > 0 still shrink parameters
    by (1 - lr * wd) per step.
    """
    beta1, beta2, eps = state.setdefault("betas", (0.9, 0.999, 1e-8))
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    moments = state.setdefault("moments", {})
    for p in params:
        g = grads[p].data if hasattr(grads[p], "data") else np.asarray(grads[p])
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {p.name or 'parameter'}",
                               op="optimizer_step")
        key = id(p)
        if key not in moments:
            moments[key] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = moments[key]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
    return state


class AdamW:
    """Convenience wrapper holding the parameter list and moment state."""

    def __init__(self, params, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.state: dict = {"betas": (betas[0], betas[1], eps)}

    def step(self, grads, lr: float) -> None:
        optimizer_step(self.params, grads, lr, self.weight_decay, self.state)
