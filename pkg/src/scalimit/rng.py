"""Per-path random streams.

Path ``i`` of a run seeded with ``seed`` always reads from the Philox
stream keyed by ``SeedSequence(seed, spawn_key=(tag, i))``, so a path is
reproduced bit for bit whether it is simulated alone or inside any batch.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def path_generator(seed: int, index: int, tag: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & MASK64, spawn_key=(int(tag), int(index)))
    return np.random.Generator(np.random.Philox(ss))


class StreamBank:
    """Buffered draws from one independent stream per path.

    ``draw(rows)`` returns the next value of each selected row's stream.
    """

    def __init__(self, seed: int, indices, tag: int = 0, kind: str = "uniform", block: int = 256):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.seed, self.tag, self.kind, self.block = int(seed), int(tag), kind, int(block)
        n = self.indices.size
        self._gens = [None] * n
        self._buf = np.empty((n, self.block))
        self._pos = np.full(n, self.block, dtype=np.int64)

    def _refill(self, r: int) -> None:
        gen = self._gens[r]
        if gen is None:
            gen = self._gens[r] = path_generator(self.seed, self.indices[r], self.tag)
        if self.kind == "uniform":
            self._buf[r] = gen.random(self.block)
        else:
            self._buf[r] = gen.standard_normal(self.block)
        self._pos[r] = 0

    def draw(self, rows: np.ndarray) -> np.ndarray:
        pos = self._pos[rows]
        for r in rows[pos >= self.block]:
            self._refill(int(r))
        pos = self._pos[rows]
        out = self._buf[rows, pos]
        self._pos[rows] = pos + 1
        return out
