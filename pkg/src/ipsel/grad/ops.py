"""Differentiable primitives and the composed losses built on them.

Each primitive computes its forward value eagerly, and records a tape
entry (inputs, backward rule) iff gradient mode is active and at least one
input requires a gradient. NaN/Inf screening of outputs is enabled through
engine.finite_checks().

Broadcasting is supported exactly where the network needs it (bias adds,
attention-weight products, scalar reductions); anything fancier raises.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericError
from . import engine, kernels
from .tensor import Tensor, constant


def _check_same_dtype(op, *tensors):
    d0 = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != d0:
            raise ContractError(f"{op}: mixed dtypes {d0} and {t.dtype}")


def _make(op, data, like):
    if engine.finite_checks_enabled() and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by op '{op}'", op=op)
    return Tensor(data, requires_grad=False, category="activations", dtype=like.dtype)


def _record(op, out, inputs, backward_fn, aux_nbytes=0):
    if engine.grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        engine.tape().record(op, out, inputs, backward_fn, aux_nbytes)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ContractError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = _make("add", data, a)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _record("add", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ContractError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = _make("mul", data, a)
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g, acc):
        if need_a:
            acc(a, _unbroadcast(g * b.data, a.shape))
        if need_b:
            acc(b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    out = _make("scale", a.data * s, a)

    def bw(g, acc):
        acc(a, g * s)

    return _record("scale", out, (a,), bw)


def embedding_add(x: Tensor, pos: Tensor) -> Tensor:
    """Add a positional table to embeddings; same rules as add."""
    _check_same_dtype("embedding_add", x, pos)
    try:
        data = x.data + pos.data
    except ValueError:
        raise ContractError(
            f"embedding_add: shapes {x.shape} and {pos.shape} do not broadcast")
    out = _make("embedding_add", data, x)

    def bw(g, acc):
        acc(x, _unbroadcast(g, x.shape))
        acc(pos, _unbroadcast(g, pos.shape))

    return _record("embedding_add", out, (x, pos), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype("concat", *tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make("concat", data, tensors[0])
    sizes = [t.shape[axis] for t in tensors]

    def bw(g, acc):
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            acc(t, g[tuple(sl)])
            offset += size

    return _record("concat", out, tuple(tensors), bw)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ContractError(
            f"slice: range [{start}, {stop}) invalid for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = _make("slice", np.ascontiguousarray(a.data[tuple(sl)]), a)

    def bw(g, acc):
        gx = np.zeros_like(a.data)
        gx[tuple(sl)] = g
        acc(a, gx)

    return _record("slice", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    """Structural view change; zero-cost, backward reshapes back."""
    out = _make("reshape", a.data.reshape(shape), a)

    def bw(g, acc):
        acc(a, g.reshape(a.shape))

    return _record("reshape", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = _make("relu", np.maximum(a.data, 0), a)

    def bw(g, acc):
        acc(a, g * (out.data > 0))

    return _record("relu", out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = _make("tanh", np.tanh(a.data), a)

    def bw(g, acc):
        acc(a, g * (1 - out.data * out.data))

    return _record("tanh", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = _make("sigmoid", data, a)

    def bw(g, acc):
        acc(a, g * out.data * (1 - out.data))

    return _record("sigmoid", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = _make("exp", np.exp(a.data), a)

    def bw(g, acc):
        acc(a, g * out.data)

    return _record("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = _make("log", np.log(a.data), a)

    def bw(g, acc):
        acc(a, g / a.data)

    return _record("log", out, (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), a)

    def bw(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        acc(a, np.broadcast_to(g, a.shape).copy())

    return _record("sum", out, (a,), bw)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make("mean", np.mean(a.data, axis=axis, keepdims=keepdims, dtype=a.dtype), a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def bw(g, acc):
        gx = g / a.dtype.type(count)
        if axis is None:
            acc(a, np.broadcast_to(gx, a.shape).copy())
            return
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        acc(a, np.broadcast_to(gx, a.shape).copy())

    return _record("mean", out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # Max-subtracted for overflow safety; invariant under constant shifts.
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)
    out = _make("softmax", data, a)

    def bw(g, acc):
        p = out.data
        dot = np.sum(g * p, axis=axis, keepdims=True)
        acc(a, p * (g - dot))

    return _record("softmax", out, (a,), bw)


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------

def _as3d(x):
    return (x[None], False) if x.ndim == 2 else (x, True)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False,
           transpose_b: bool = False) -> Tensor:
    """a @ b with optional transposes; 2D or batched-3D operands.

    A 2D operand broadcasts across the other operand's batch dimension.
    """
    _check_same_dtype("matmul", a, b)
    if transpose_a and transpose_b:
        raise ContractError("matmul: transpose_a with transpose_b is unsupported")
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ContractError(f"matmul: ranks {a.ndim} x {b.ndim} unsupported")

    ka = a.shape[-2] if transpose_a else a.shape[-1]
    kb = b.shape[-1] if transpose_b else b.shape[-2]
    if ka != kb:
        raise ContractError(
            f"matmul: inner dimensions disagree for shapes {a.shape} "
            f"(transpose_a={transpose_a}) and {b.shape} (transpose_b={transpose_b})")

    if a.ndim == 2 and b.ndim == 2:
        if transpose_a:
            data = kernels.matmul_tn(a.data, b.data)
        elif transpose_b:
            data = kernels.matmul_nt(a.data, b.data)
        else:
            data = kernels.matmul_nn(a.data, b.data)
    else:
        a3, _ = _as3d(a.data)
        b3, _ = _as3d(b.data)
        if a3.shape[0] != b3.shape[0] and a3.shape[0] != 1 and b3.shape[0] != 1:
            raise ContractError(
                f"matmul: batch dimensions disagree: {a.shape} vs {b.shape}")
        mode = "tn" if transpose_a else ("nt" if transpose_b else "nn")
        data = kernels.bmm(a3, b3, mode)
    out = _make("matmul", data, a)

    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g, acc):
        g3 = g if g.ndim == 3 else g[None]
        a3, _ = _as3d(a.data)
        b3, _ = _as3d(b.data)
        ga = gb = None
        if not transpose_a and not transpose_b:
            if need_a:
                ga = kernels.bmm(g3, b3, "nt")
            if need_b:
                gb = kernels.bmm(a3, g3, "tn")
        elif transpose_b:
            # out = a @ b^T
            if need_a:
                ga = kernels.bmm(g3, b3, "nn")
            if need_b:
                gb = kernels.bmm(g3, a3, "tn")
        else:
            # out = a^T @ b
            if need_a:
                ga = kernels.bmm(b3, g3, "nt")
            if need_b:
                gb = kernels.bmm(a3, g3, "nn")
        if ga is not None:
            if a.ndim == 2:
                ga = ga.sum(axis=0) if ga.shape[0] > 1 else ga[0]
            acc(a, ga.reshape(a.shape))
        if gb is not None:
            if b.ndim == 2:
                gb = gb.sum(axis=0) if gb.shape[0] > 1 else gb[0]
            acc(b, gb.reshape(b.shape))

    return _record("matmul", out, (a, b), bw)


# ---------------------------------------------------------------------------
# Normalization, dropout, convolution, pooling
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check_same_dtype("layer_norm", x, gain, bias)
    mu = np.mean(x.data, axis=-1, keepdims=True, dtype=x.dtype)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = _make("layer_norm", xhat * gain.data + bias.data, x)
    n = x.shape[-1]

    def bw(g, acc):
        gxhat = g * gain.data
        m1 = np.mean(gxhat, axis=-1, keepdims=True, dtype=x.dtype)
        m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True, dtype=x.dtype)
        acc(x, inv * (gxhat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        acc(gain, np.sum(g * xhat, axis=red))
        acc(bias, np.sum(g, axis=red))

    return _record("layer_norm", out, (x, gain, bias), bw,
                   aux_nbytes=xhat.nbytes + inv.nbytes)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (B,) or (B, H, W) per channel.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (they are checkpoint state, never differentiated).
    Eval mode applies the running statistics, making the forward pass a
    per-sample affine map.
    """
    _check_same_dtype("batch_norm", x, gamma, beta)
    if x.ndim == 4:
        red = (0, 2, 3)
        shape = (1, -1, 1, 1)
    elif x.ndim == 2:
        red = (0,)
        shape = (1, -1)
    else:
        raise ContractError(f"batch_norm: rank {x.ndim} unsupported")
    eps = x.dtype.type(eps)

    if engine.is_training():
        out_data, mu, var, inv = kernels.bn_train_forward(x.data, gamma.data,
                                                          beta.data, eps)
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
        out = _make("batch_norm", out_data, x)

        def bw(g, acc):
            gx, ggamma, gbeta = kernels.bn_train_backward(x.data, g, mu, inv,
                                                          gamma.data)
            acc(x, gx)
            acc(gamma, ggamma)
            acc(beta, gbeta)

        return _record("batch_norm", out, (x, gamma, beta), bw,
                       aux_nbytes=mu.nbytes + inv.nbytes)

    inv = (1.0 / np.sqrt(running_var.data + eps)).astype(x.dtype)
    sc = (gamma.data * inv).reshape(shape)
    sh = (beta.data - gamma.data * running_mean.data * inv).reshape(shape)
    out = _make("batch_norm", x.data * sc + sh, x)

    def bw_eval(g, acc):
        acc(x, g * sc)
        xhat_e = (x.data - running_mean.data.reshape(shape)) * inv.reshape(shape)
        acc(gamma, np.sum(g * xhat_e, axis=red))
        acc(beta, np.sum(g, axis=red))

    return _record("batch_norm", out, (x, gamma, beta), bw_eval)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout; identity in eval mode (no draw, no entry)."""
    if not engine.is_training() or p <= 0.0:
        return x
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    out = _make("dropout", x.data * mask, x)

    def bw(g, acc):
        acc(x, g * mask)

    return _record("dropout", out, (x,), bw, aux_nbytes=mask.nbytes)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    _check_same_dtype("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv2d: expected 4D input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ContractError(
            f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    kh = w.shape[2]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kh:
        raise ContractError(
            f"conv2d: spatial size {x.shape[2:]} too small for kernel {kh} "
            f"with padding {padding}")
    b_arr = bias.data if bias is not None else np.zeros(w.shape[0], dtype=x.dtype)
    data = kernels.conv2d_forward(x.data, w.data, b_arr, stride, padding)
    out = _make("conv2d", data, x)
    inputs = (x, w) if bias is None else (x, w, bias)
    # Skip expensive partials no one will consume (e.g. raw pixel inputs).
    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g, acc):
        g = np.ascontiguousarray(g)
        if need_x:
            acc(x, kernels.conv2d_grad_input(g, x.shape, w.data, stride, padding))
        if need_w:
            acc(w, kernels.conv2d_grad_weight(g, x.data, w.shape, stride, padding))
        if bias is not None and bias.requires_grad:
            acc(bias, g.sum(axis=(0, 2, 3)))

    return _record("conv2d", out, inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ContractError(f"global_avg_pool: expected 4D input, got {x.shape}")
    out = _make("global_avg_pool", np.mean(x.data, axis=(2, 3), dtype=x.dtype), x)
    hw = x.shape[2] * x.shape[3]

    def bw(g, acc):
        acc(x, np.broadcast_to((g / x.dtype.type(hw))[:, :, None, None], x.shape).copy())

    return _record("global_avg_pool", out, (x,), bw)


# ---------------------------------------------------------------------------
# Generic dispatcher
# ---------------------------------------------------------------------------

_DISPATCH = {
    "matmul": lambda inputs, attrs: matmul(*inputs, **attrs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["factor"]),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", 0)),
    "slice": lambda inputs, attrs: slice_(inputs[0], attrs["axis"],
                                          attrs["start"], attrs["stop"]),
    "softmax": lambda inputs, attrs: softmax(inputs[0], axis=attrs.get("axis", -1)),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "tanh": lambda inputs, attrs: tanh(inputs[0]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "log": lambda inputs, attrs: log(inputs[0]),
    "mean": lambda inputs, attrs: mean_(inputs[0], axis=attrs.get("axis"),
                                        keepdims=attrs.get("keepdims", False)),
    "sum": lambda inputs, attrs: sum_(inputs[0], axis=attrs.get("axis"),
                                      keepdims=attrs.get("keepdims", False)),
    "layer_norm": lambda inputs, attrs: layer_norm(*inputs, eps=attrs.get("eps", 1e-5)),
    "batch_norm": lambda inputs, attrs: batch_norm(*inputs,
                                                   momentum=attrs.get("momentum", 0.1),
                                                   eps=attrs.get("eps", 1e-5)),
    "dropout": lambda inputs, attrs: dropout(inputs[0], attrs["p"], attrs["rng"]),
    "conv2d": lambda inputs, attrs: conv2d(*inputs, stride=attrs.get("stride", 1),
                                           padding=attrs.get("padding", 0)),
    "global_avg_pool": lambda inputs, attrs: global_avg_pool(inputs[0]),
    "embedding_add": lambda inputs, attrs: embedding_add(*inputs),
}


def primitive_forward(op_id: str, inputs, attrs=None) -> Tensor:
    """Generic entry point: run one primitive by name."""
    if op_id not in _DISPATCH:
        raise ContractError(f"unknown primitive op_id: {op_id!r}")
    return _DISPATCH[op_id](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# Composed losses (built from primitives; gradients flow through the tape)
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, onehot: Tensor) -> Tensor:
    """Mean cross-entropy of softmax(logits) against one-hot targets.

    The row max is subtracted as a detached shift, which keeps the
    log-sum-exp finite without altering gradients.
    """
    shift = constant(np.max(logits.data, axis=-1, keepdims=True),
                     dtype=logits.dtype, tracked=False)
    z = add(logits, scale(shift, -1.0))
    lse = add(log(sum_(exp(z), axis=-1, keepdims=True)), shift)
    picked = sum_(mul(logits, onehot), axis=-1, keepdims=True)
    return mean_(add(lse, scale(picked, -1.0)))


def binary_cross_entropy_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean of softplus(logits) - targets * logits, computed stably."""
    mag = add(relu(logits), relu(scale(logits, -1.0)))  # |logits|
    one = constant(np.ones_like(logits.data), dtype=logits.dtype, tracked=False)
    softplus = add(relu(logits), log(add(one, exp(scale(mag, -1.0)))))
    return mean_(add(softplus, scale(mul(targets, logits), -1.0)))
