"""Shared per-patch feature extractor.

A small residual network: a 3x3 stride-1 stem (large-stride stems would
destroy signal on patches as small as 25 px), one identity residual block
at the base width, and one stride-2 residual block at twice the base width
with a 1x1 projection shortcut. Global average pooling yields the feature
vector, so the parameter count is independent of patch size.

Two forward paths produce embeddings:

  * the differentiable path, built from primitives, used for training;
  * a fused no-gradient evaluation path that folds each batch-norm (running
    statistics) and ReLU into its convolution kernel. It allocates only one
    intermediate per layer and is what the selection loop runs on. Both
    paths are per-sample independent in eval mode, so an embedding does not
    depend on which batch it was computed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, ModeError
from ..grad import engine, kernels, ops
from ..grad.layers import BatchNorm2d, Conv2d, Module
from ..grad.rng import StreamSet
from ..grad.tensor import F32, Tensor

MIN_PATCH_SIDE = 4
_EVAL_SUB_BATCH = 512  # keeps fused kernels in cache on big chunks


@dataclass
class EncoderConfig:
    in_channels: int = 1
    base_channels: int = 64

    @property
    def feature_dim(self) -> int:
        return 2 * self.base_channels


class PatchEncoder(Module):
    def __init__(self, config: EncoderConfig, streams: StreamSet,
                 name: str = "encoder", dtype=F32):
        super().__init__(name)
        c1 = config.base_channels
        c2 = 2 * c1
        self.config = config
        self.feature_dim = c2
        self.dtype = dtype

        def conv(suffix, cin, cout, k, stride):
            return self.add_child(Conv2d(f"{name}.{suffix}", cin, cout, k, streams,
                                         stride=stride, padding=k // 2 if k == 3 else 0,
                                         bias=False, dtype=dtype))

        def bn(suffix, ch):
            return self.add_child(BatchNorm2d(f"{name}.{suffix}", ch, dtype=dtype))

        self.stem_conv = conv("stem.conv", config.in_channels, c1, 3, 1)
        self.stem_bn = bn("stem.bn", c1)
        self.b1_conv1 = conv("block1.conv1", c1, c1, 3, 1)
        self.b1_bn1 = bn("block1.bn1", c1)
        self.b1_conv2 = conv("block1.conv2", c1, c1, 3, 1)
        self.b1_bn2 = bn("block1.bn2", c1)
        self.b2_conv1 = conv("block2.conv1", c1, c2, 3, 2)
        self.b2_bn1 = bn("block2.bn1", c2)
        self.b2_conv2 = conv("block2.conv2", c2, c2, 3, 1)
        self.b2_bn2 = bn("block2.bn2", c2)
        self.b2_proj = conv("block2.proj", c1, c2, 1, 2)
        self.b2_bn_proj = bn("block2.bn_proj", c2)

    # -- differentiable path ------------------------------------------------

    def __call__(self, x: Tensor) -> Tensor:
        self._check_spatial(x.shape[2], x.shape[3])
        h = ops.relu(self.stem_bn(self.stem_conv(x)))
        r = ops.relu(self.b1_bn1(self.b1_conv1(h)))
        r = self.b1_bn2(self.b1_conv2(r))
        h = ops.relu(ops.add(r, h))
        s = self.b2_bn_proj(self.b2_proj(h))
        r = ops.relu(self.b2_bn1(self.b2_conv1(h)))
        r = self.b2_bn2(self.b2_conv2(r))
        h = ops.relu(ops.add(r, s))
        return ops.global_avg_pool(h)

    # -- embedding entry point ----------------------------------------------

    def embed(self, patches, grad: bool) -> Tensor:
        """Embeddings (batch, feature_dim) for a (batch, C, p, p) pixel block.

        grad=False requires the caller to hold a no-gradient scope; it runs
        the fused evaluation path when the engine is in eval mode.
        """
        x = patches if isinstance(patches, Tensor) else Tensor(
            np.asarray(patches, dtype=self.dtype), category="patch_pixels")
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ContractError(
                f"embed expects (batch, {self.config.in_channels}, p, p), got {x.shape}")
        if grad:
            return self(x)
        if engine.grad_enabled():
            raise ModeError("embed(grad=False) requires an enclosing no-gradient scope")
        if engine.is_training():
            return self(x)  # no-grad but batch statistics; recording is off anyway
        return self._embed_eval(x)

    def _check_spatial(self, h: int, w: int) -> None:
        if h < MIN_PATCH_SIDE or w < MIN_PATCH_SIDE:
            raise ContractError(
                f"spatial size {h}x{w} below network minimum {MIN_PATCH_SIDE}")

    def _embed_eval(self, x: Tensor) -> Tensor:
        self._check_spatial(x.shape[2], x.shape[3])
        batch = x.shape[0]
        out = np.empty((batch, self.feature_dim), dtype=self.dtype)
        for start in range(0, batch, _EVAL_SUB_BATCH):
            stop = min(start + _EVAL_SUB_BATCH, batch)
            out[start:stop] = self._eval_chunk(x.data[start:stop])
        return Tensor(out, category="activations", dtype=self.dtype)

    def _eval_chunk(self, x: np.ndarray) -> np.ndarray:
        def fused(conv, bn, xin, other=None, use_relu=True):
            scale, shift = bn.eval_scale_shift()
            data = kernels.conv2d_fused_eval(
                xin, conv.weight.data, scale, shift,
                conv.stride, conv.padding, other=other, relu=use_relu)
            # wrap so the ledger sees the intermediate; freed with the scope
            return Tensor(data, category="activations", dtype=self.dtype).data

        h = fused(self.stem_conv, self.stem_bn, x)
        r = fused(self.b1_conv1, self.b1_bn1, h)
        h = fused(self.b1_conv2, self.b1_bn2, r, other=h, use_relu=True)
        s = fused(self.b2_proj, self.b2_bn_proj, h, use_relu=False)
        r = fused(self.b2_conv1, self.b2_bn1, h)
        h = fused(self.b2_conv2, self.b2_bn2, r, other=s, use_relu=True)
        pooled = np.mean(h, axis=(2, 3), dtype=self.dtype)
        return pooled
