"""Counter-based Gaussian noise streams.

Every draw is addressed by ``(master_seed, purpose tag, step index)``; the
block for one step is produced by a fresh Philox generator whose key is
derived from that address, so results never depend on call order, on how
many other streams were used, or on how work is split across workers.
Row ``i`` of a block belongs to particle (or path) ``i``; because numpy fills
arrays row by row, row ``i`` is the same for any block with more than ``i`` rows.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class NoiseStream:
    def __init__(self, master_seed: int, tag: str = "W"):
        self.master_seed = int(master_seed)
        self.tag = tag
        self._code = _tag_code(tag)

    def __repr__(self):
        return f"NoiseStream(master_seed={self.master_seed}, tag={self.tag!r})"

    def generator(self, step: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed & (2**64 - 1), spawn_key=(self._code, int(step)))
        return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))

    def normal(self, step: int, shape) -> np.ndarray:
        return self.generator(step).standard_normal(shape)

    def uniform(self, step: int, shape) -> np.ndarray:
        return self.generator(step).random(shape)

    def increments(self, step: int, count: int, dim: int, dt: float) -> np.ndarray:
        """Brownian increments ``N(0, dt I_dim)`` for ``count`` particles at ``step``."""
        return np.sqrt(dt) * self.normal(step, (count, dim))

    def child(self, suffix: str) -> "NoiseStream":
        return NoiseStream(self.master_seed, f"{self.tag}/{suffix}")


class ZeroNoise(NoiseStream):
    """Drop-in stream that returns zero increments (deterministic runs)."""

    def __init__(self):
        super().__init__(0, "zero")

    def normal(self, step, shape):
        return np.zeros(shape)
