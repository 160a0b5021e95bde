"""Seedable random stream with a fixed, documented draw algorithm.

The raw 64-bit words come from numpy's PCG64 bit generator, whose output
sequence is stable across numpy releases and platforms. Everything derived
from the raw words is computed here rather than through ``numpy.random.Generator``
(whose methods carry no cross-version stream guarantee):

* uniform real:  ``(word >> 11) * 2**-53``, in [0, 1)
* integer [0,n): ``floor(uniform * n)``
* permutation:   Fisher-Yates from the top, ``j = integer(i + 1)`` for i = n-1 .. 1
* normal:        Box-Muller on consecutive uniform pairs ``(u1, u2)``, using
                 ``1 - u1`` inside the log; both deviates of a pair are used in order
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "pcg64-seedseq/u53/fisher-yates/box-muller"

_MASK64 = (1 << 64) - 1
_U53 = 2.0 ** -53


class RngStream:
    """Exclusively-owned random stream; never share one across tasks."""

    algorithm = ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.PCG64(self.seed)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed})"

    def raw(self, size: int) -> np.ndarray:
        return self._bitgen.random_raw(size)

    def uniform(self, size=None):
        """Uniform reals in [0, 1). Returns a float when ``size`` is None."""
        if size is None:
            return (int(self._bitgen.random_raw()) >> 11) * _U53
        n = int(np.prod(size))
        u = (self._bitgen.random_raw(n) >> np.uint64(11)).astype(np.float64) * _U53
        return u.reshape(size)

    def integers(self, n, size=None):
        """Uniform integers in [0, n). ``n`` may be an array broadcast against ``size``."""
        if size is None and np.ndim(n) == 0:
            n = int(n)
            if n < 1:
                raise ValueError(f"integers upper bound must be >= 1, got {n}")
            return int(self.uniform() * n)
        n_arr = np.asarray(n, dtype=np.int64)
        if np.any(n_arr < 1):
            raise ValueError("integers upper bound must be >= 1")
        if size is None:
            size = n_arr.shape
        u = self.uniform(size)
        return np.floor(u * n_arr).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k in range(n - 1):
            i = n - 1 - k
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def normal(self, size=None):
        """Standard normal deviates (Box-Muller)."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        z = z.reshape(-1)[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)
