"""Per-trajectory random streams.

Trajectory ``i`` of a run seeded with ``seed`` draws from a Philox counter
generator whose 128-bit key is ``(seed, i)``. Streams are therefore
independent of how trajectories are scheduled or grouped, and distinct
``(seed, i)`` pairs never share a key.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

SEED_MAX = 2**64 - 1
_TINY = 2.0**-54


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or int(seed) != seed or not 0 <= int(seed) <= SEED_MAX:
        raise ValueError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return int(seed)


def trajectory_stream(seed: int, index: int) -> np.random.Generator:
    seed = check_seed(seed)
    index = check_seed(index)
    return np.random.Generator(np.random.Philox(key=(seed << 64) | index))


class StreamBank:
    """Buffered uniform draws for a batch of trajectories, one stream per row.

    Rows consume their own stream sequentially, so the values a trajectory
    sees do not depend on the chunk size or on which other rows are present.
    """

    def __init__(self, seed: int, indices, chunk: int = 1024):
        self.seed = check_seed(seed)
        self.indices = np.asarray(indices, dtype=np.int64)
        self._gens = [trajectory_stream(self.seed, int(i)) for i in self.indices]
        self.chunk = int(chunk)
        self._buf = np.empty((len(self._gens), self.chunk))
        for row, g in enumerate(self._gens):
            self._buf[row] = g.random(self.chunk)
        self._pos = np.zeros(len(self._gens), dtype=np.int64)
        self._rows = np.arange(len(self._gens))

    @property
    def size(self) -> int:
        return len(self._gens)

    def _refill(self, rows) -> None:
        for row in rows:
            self._buf[row] = self._gens[row].random(self.chunk)
            self._pos[row] = 0

    def uniform(self, rows=None) -> np.ndarray:
        """One uniform in [0, 1) for each selected row (all rows by default)."""
        rows = self._rows if rows is None else np.asarray(rows)
        out = self._buf[rows, self._pos[rows]]
        self._pos[rows] += 1
        spent = rows[self._pos[rows] == self.chunk]
        if spent.size:
            self._refill(spent)
        return out

    def normal(self, rows=None) -> np.ndarray:
        """Standard normals by inverse CDF of the row's uniform stream."""
        # maximum() keeps u = 0 off the pole; u < 1 always holds
        return ndtri(np.maximum(self.uniform(rows), _TINY))
