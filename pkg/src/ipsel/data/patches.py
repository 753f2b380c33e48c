"""Tiling of an image into a lazily indexed grid of patches."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


class PatchGrid:
    """Row-major view of an image as N = rows * cols patches.

    Patches lie fully inside the image; there is no implicit padding, so
    rows = floor((H - patch_size) / stride) + 1 and likewise for cols.
    The grid never copies pixels until a patch is fetched.
    """

    def __init__(self, image: np.ndarray, patch_size: int, stride: int):
        if image.ndim != 2:
            raise ContractError(f"PatchGrid expects a (H, W) image, got {image.shape}")
        h, w = image.shape
        if patch_size > min(h, w):
            raise ContractError(
                f"patch_size {patch_size} exceeds image side {min(h, w)}")
        if stride < 1:
            raise ContractError(f"stride must be >= 1, got {stride}")
        self.image = image
        self.patch_size = int(patch_size)
        self.stride = int(stride)
        self.rows = (h - patch_size) // stride + 1
        self.cols = (w - patch_size) // stride + 1
        self.n_patches = self.rows * self.cols

    def rect(self, index: int) -> tuple[int, int]:
        """Top-left (y, x) pixel of patch `index`."""
        if not 0 <= index < self.n_patches:
            raise ContractError(f"patch index {index} out of range [0, {self.n_patches})")
        r, c = divmod(index, self.cols)
        return r * self.stride, c * self.stride

    def fetch(self, index: int) -> np.ndarray:
        y, x = self.rect(index)
        p = self.patch_size
        return self.image[y : y + p, x : x + p]

    def fetch_batch(self, indices) -> np.ndarray:
        """Pixels of the given patches as a (K, 1, p, p) block."""
        p = self.patch_size
        out = np.empty((len(indices), 1, p, p), dtype=self.image.dtype)
        for k, index in enumerate(indices):
            y, x = self.rect(index)
            out[k, 0] = self.image[y : y + p, x : x + p]
        return out


def tile(image: np.ndarray, patch_size: int, stride: int) -> PatchGrid:
    return PatchGrid(image, patch_size, stride)
