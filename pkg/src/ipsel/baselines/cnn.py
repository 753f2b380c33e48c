"""Plain CNN over the whole image, with a sinusoidal position channel.

The same encoder architecture runs on the full image instead of patches,
so its activation bytes scale with the pixel count; the ledger records
that growth. A second input channel carries the sine of the flattened
pixel index, giving the network some positional signal.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from ..grad.tensor import Tensor


def sinusoid_channel(h: int, w: int, dtype=np.float32) -> np.ndarray:
    idx = np.arange(h * w, dtype=np.float64)
    return np.sin(idx).reshape(h, w).astype(dtype)


def cnn_inputs(images: np.ndarray) -> np.ndarray:
    """(B, H, W) pixels -> (B, 2, H, W) with the position channel appended."""
    if images.ndim != 3:
        raise ContractError(f"cnn_inputs expects (B, H, W), got {images.shape}")
    b, h, w = images.shape
    chan = sinusoid_channel(h, w, dtype=images.dtype)
    out = np.empty((b, 2, h, w), dtype=images.dtype)
    out[:, 0] = images
    out[:, 1] = chan
    return out


def cnn_forward(images: np.ndarray, encoder, heads, grad: bool = True):
    """Per-task logits for a batch of full images."""
    x = Tensor(cnn_inputs(np.asarray(images)), category="patch_pixels")
    pooled = encoder(x) if grad else encoder.embed(x, grad=False)
    return heads(pooled)
