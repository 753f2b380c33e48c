"""Parameterized layers built on the primitives.

Initialization policy (recorded once here, applied everywhere): weights of
linear and convolution layers draw uniformly from +-sqrt(1/fan_in) using
the stream named "init.<parameter name>", biases start at zero, layer-norm
gain/bias at 1/0, batch-norm gamma/beta at 1/0 with running stats 0/1.
Batch-norm running statistics are checkpoint state with requires_grad off.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from . import ops
from .rng import StreamSet
from .tensor import F32, Tensor, parameter


def _uniform_init(streams: StreamSet, name: str, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    rng = streams.fresh(f"init.{name}")
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter container; children registered in creation order."""

    def __init__(self, name: str):
        self.name = name
        self._params: list[Tensor] = []
        self._children: list[Module] = []

    def register(self, tensor: Tensor) -> Tensor:
        self._params.append(tensor)
        return tensor

    def add_child(self, child: "Module") -> "Module":
        self._children.append(child)
        return child

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [(p.name, p) for p in self._params]
        for child in self._children:
            out.extend(child.named_params())
        return out

    def trainable_params(self) -> list[Tensor]:
        return [p for _, p in self.named_params() if p.requires_grad]


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, streams: StreamSet,
                 bias: bool = True, dtype=F32):
        super().__init__(name)
        self.weight = self.register(parameter(
            _uniform_init(streams, f"{name}.weight", (d_in, d_out), d_in, dtype),
            name=f"{name}.weight", dtype=dtype))
        self.bias = None
        if bias:
            self.bias = self.register(parameter(
                np.zeros(d_out, dtype=dtype), name=f"{name}.bias", dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int,
                 streams: StreamSet, stride: int = 1, padding: int = 0,
                 bias: bool = False, dtype=F32):
        super().__init__(name)
        fan_in = c_in * kernel * kernel
        self.stride = stride
        self.padding = padding
        self.weight = self.register(parameter(
            _uniform_init(streams, f"{name}.weight", (c_out, c_in, kernel, kernel),
                          fan_in, dtype),
            name=f"{name}.weight", dtype=dtype))
        self.bias = None
        if bias:
            self.bias = self.register(parameter(
                np.zeros(c_out, dtype=dtype), name=f"{name}.bias", dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias,
                          stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, name: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=F32):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.register(parameter(
            np.ones(channels, dtype=dtype), name=f"{name}.gamma", dtype=dtype))
        self.beta = self.register(parameter(
            np.zeros(channels, dtype=dtype), name=f"{name}.beta", dtype=dtype))
        rm = parameter(np.zeros(channels, dtype=dtype), name=f"{name}.running_mean",
                       dtype=dtype)
        rv = parameter(np.ones(channels, dtype=dtype), name=f"{name}.running_var",
                       dtype=dtype)
        rm.requires_grad = False
        rv.requires_grad = False
        self.running_mean = self.register(rm)
        self.running_var = self.register(rv)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, momentum=self.momentum, eps=self.eps)

    def eval_scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Folded (scale, shift) for the fused eval convolution path."""
        inv = 1.0 / np.sqrt(self.running_var.data + self.running_var.dtype.type(self.eps))
        scale = (self.gamma.data * inv).astype(self.gamma.dtype)
        shift = (self.beta.data - self.gamma.data * self.running_mean.data * inv
                 ).astype(self.gamma.dtype)
        return scale, shift


class LayerNorm(Module):
    def __init__(self, name: str, dim: int, eps: float = 1e-5, dtype=F32):
        super().__init__(name)
        self.eps = eps
        self.gain = self.register(parameter(
            np.ones(dim, dtype=dtype), name=f"{name}.gain", dtype=dtype))
        self.bias = self.register(parameter(
            np.zeros(dim, dtype=dtype), name=f"{name}.bias", dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Dropout:
    """Stateless apart from its named stream; identity in eval mode."""

    def __init__(self, p: float, streams: StreamSet, stream_name: str):
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self._rng = streams.get(f"dropout.{stream_name}")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, self._rng)
