"""Deterministic low-discrepancy point sets."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc


def halton(n: int, dim: int, offset: int = 0) -> np.ndarray:
    """First ``n`` Halton points after skipping ``offset + 1`` (the origin).

    Coordinate ``k`` is the van der Corput sequence in the ``k``-th prime
    base, so prefixes of the sequence are nested for a fixed ``offset``.
    """
    engine = qmc.Halton(dim, scramble=False)
    engine.fast_forward(1 + int(offset))
    return engine.random(n)


@lru_cache(maxsize=32)
def _sphere(n: int, d: int, offset: int) -> np.ndarray:
    q = halton(n, d, offset)
    g = ndtri(np.clip(q, 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    g.setflags(write=False)
    return g


def sphere_points(n: int, d: int, offset: int = 0) -> np.ndarray:
    """Unit vectors in R^d from normalised Gaussian transforms of Halton points."""
    return _sphere(int(n), int(d), int(offset)).copy()


def ball_points(n: int, d: int, radius: float = 1.0, offset: int = 0) -> np.ndarray:
    """Points of the open ball ``B(0, radius)``.

    Sobol points of the cube are pushed radially onto the ball with
    ``|y|_2 = |x|_inf``, then pulled in slightly so they stay open.
    """
    engine = qmc.Sobol(d, scramble=False)
    engine.fast_forward(1 + int(offset))
    x = 2.0 * engine.random(n) - 1.0
    ninf = np.max(np.abs(x), axis=1)
    n2 = np.linalg.norm(x, axis=1)
    y = x * np.divide(ninf, n2, out=np.zeros_like(n2), where=n2 > 0)[:, None]
    return y * radius * (1.0 - 1e-9)
