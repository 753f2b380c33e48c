"""Patch tiling, positional encoding, and the synthetic digit benchmark."""

from .megamnist import (MegaMnistDataset, MegaMnistSpec, Placement, TaskLabels,
                        default_noise_count, generate_image, generate_megamnist,
                        labels_from_placements)
from .patches import PatchGrid, tile
from .posenc import positional_encoding

__all__ = [
    "PatchGrid", "tile", "positional_encoding",
    "MegaMnistSpec", "MegaMnistDataset", "TaskLabels", "Placement",
    "generate_megamnist", "generate_image", "labels_from_placements",
    "default_noise_count",
]
