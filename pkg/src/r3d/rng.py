"""Seeded, splittable random streams.

Every stochastic routine in the package takes an explicit Rng; nothing reads
global random state. Rng wraps numpy's SeedSequence/PCG64 so a parent stream
can be split into independent children (per sample, per step) while keeping
the whole program a pure function of the root seed.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """A PCG64 generator plus its SeedSequence, so it can spawn children."""

    def __init__(self, seed, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["Rng"]:
        """Spawn n child streams; deterministic given call order."""
        return [Rng(None, _seq=s) for s in self._seq.spawn(n)]

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)
