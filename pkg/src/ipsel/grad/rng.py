"""Named, independently seeded random streams.

Every stochastic consumer (parameter init, dropout, data generation, random
patch selection) owns a stream derived from (master seed, stream name), so
adding or reordering consumers never perturbs the draws seen by the others.
Streams are counter-based (Philox) and fully reproducible across runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_entropy(master_seed: int, name: str) -> list[int]:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return [int(master_seed) & 0xFFFFFFFFFFFFFFFF, *words]


def named_stream(master_seed: int, name: str) -> np.random.Generator:
    """Return a generator whose draws depend only on (master_seed, name)."""
    seq = np.random.SeedSequence(_stream_entropy(master_seed, name))
    return np.random.Generator(np.random.Philox(seq))


class StreamSet:
    """Lazily created named streams under one master seed.

    Each distinct name gets its own independent generator; asking for the
    same name twice returns the same generator object (its counter state
    advances as it is consumed).
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = named_stream(self.master_seed, name)
        return self._streams[name]

    def fresh(self, name: str) -> np.random.Generator:
        """A brand-new generator for `name`, ignoring any consumed state."""
        return named_stream(self.master_seed, name)
