"""Reproducible per-path random streams and Brownian increment grids.

Each Monte-Carlo path owns a counter-based (Philox) stream keyed by
``(master_seed, path_index)``, so a path's draws never depend on how paths
are batched or distributed over workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import GridMismatch


@dataclass(eq=False)
class PathStream:
    master_seed: int
    path_index: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        seq = np.random.SeedSequence(entropy=int(self.master_seed),
                                     spawn_key=(int(self.path_index),))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def fresh(self) -> "PathStream":
        """A new stream at the start of the same sequence."""
        return PathStream(self.master_seed, self.path_index)

    def normal(self, size):
        return self.generator.standard_normal(size)


def make_path_streams(master_seed: int, n_paths: int, start: int = 0) -> list[PathStream]:
    if n_paths < 1:
        raise ValueError("need at least one path")
    return [PathStream(master_seed, start + i) for i in range(n_paths)]


class NoiseFeed:
    """Standard normal draws for a batch of paths, one stream per path.

    ``normals(n)`` returns an array of shape ``(n, n_paths, dim)`` whose column
    ``i`` is the next ``n * dim`` values of path ``i``'s own stream.
    """

    def __init__(self, streams: Sequence[PathStream], dim: int, chunk: int = 256):
        self.streams = list(streams)
        self.dim = int(dim)
        self.chunk = int(chunk)
        self._buf = np.empty((0, len(self.streams), self.dim))
        self._pos = 0

    @property
    def n_paths(self):
        return len(self.streams)

    def _draw(self, n):
        out = np.empty((n, len(self.streams), self.dim))
        for i, st in enumerate(self.streams):
            out[:, i, :] = st.normal((n, self.dim))
        return out

    def normals(self, n: int) -> np.ndarray:
        # buffered reads are stream-exact: numpy draws are invariant to chunking
        avail = len(self._buf) - self._pos
        if n > avail:
            fresh = self._draw(max(n - avail, self.chunk))
            self._buf = np.concatenate([self._buf[self._pos:], fresh])
            self._pos = 0
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out


@dataclass(frozen=True, eq=False)
class BrownianGrid:
    """Increments ``dW_j ~ N(0, h I)`` on a uniform grid covering ``span``.

    ``increments`` has shape ``(count, ..., m)``; the middle axes index paths
    when the grid was drawn for a batch.
    """

    h: float
    increments: np.ndarray
    span: float

    @property
    def count(self):
        return self.increments.shape[0]

    def window(self, start: int, n: int) -> np.ndarray:
        return self.increments[start:start + n]

    def aggregate(self, n: int) -> np.ndarray:
        """Sum consecutive groups of ``n`` increments (a coarser grid's increments)."""
        if self.count % n:
            raise GridMismatch(f"{self.count} increments cannot be grouped by {n}")
        shape = (self.count // n, n) + self.increments.shape[1:]
        return self.increments.reshape(shape).sum(axis=1)

    def as_pairs(self):
        return [(self.h, dw) for dw in self.increments]


def grid_count(h: float, span: float) -> int:
    n = int(round(span / h))
    if n < 1 or abs(n * h - span) > 1e-9 * max(1.0, span):
        raise GridMismatch(f"span {span} is not an integer multiple of h = {h}")
    return n


def brownian_grid(source, h: float, span: float, dim: int = 1) -> BrownianGrid:
    """Draw a Brownian grid from a :class:`PathStream` or a :class:`NoiseFeed`."""
    n = grid_count(h, span)
    if isinstance(source, NoiseFeed):
        z = source.normals(n)
    else:
        z = source.normal((n, dim))
    return BrownianGrid(float(h), np.sqrt(h) * z, float(n * h))
