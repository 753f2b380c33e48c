"""Built-in 10-glyph digit font.

The benchmark only needs ten visually distinct digit classes, so instead
of shipping an external corpus we rasterize a classic 5x7 bitmap font to
the requested glyph size. A loader hook lets callers substitute real digit
images (e.g. handwriting scans) when they have them.
"""

from __future__ import annotations

import numpy as np

_FONT_5X7 = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],  # 0
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],  # 1
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],  # 2
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],  # 3
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],  # 4
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],  # 5
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],  # 6
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],  # 7
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],  # 8
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],  # 9
]


def _bitmap(cls: int) -> np.ndarray:
    rows = _FONT_5X7[cls]
    return np.array([[float(ch) for ch in row] for row in rows], dtype=np.float32)


def default_glyph(cls: int, size: int) -> np.ndarray:
    """Nearest-neighbour upscale of the builtin bitmap to (size, size)."""
    bm = _bitmap(cls)
    ri = (np.arange(size) * bm.shape[0]) // size
    ci = (np.arange(size) * bm.shape[1]) // size
    return bm[np.ix_(ri, ci)]


def glyph_set(size: int, loader=None) -> list[np.ndarray]:
    """All ten glyphs at `size` px; `loader(cls, size)` overrides the font."""
    make = loader or default_glyph
    glyphs = []
    for cls in range(10):
        g = np.asarray(make(cls, size), dtype=np.float32)
        if g.shape != (size, size):
            raise ValueError(f"glyph loader returned shape {g.shape} for class {cls}")
        glyphs.append(np.clip(g, 0.0, 1.0))
    return glyphs


def ink_bbox(glyph: np.ndarray) -> tuple[int, int, int, int]:
    """(top, left, bottom, right) of nonzero pixels, bottom/right exclusive."""
    ys, xs = np.nonzero(glyph > 0)
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1
