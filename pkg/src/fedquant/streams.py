"""Derived random streams for order-independent, reproducible simulation.

Every random decision in a run draws from a generator addressed by a path of
integers under one master seed, e.g. ``substream(seed, 1, round, op, client)``.
Two calls with the same path always yield identical streams, and streams with
different paths are statistically independent, so per-client work can be
reordered or parallelized without changing any result.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream"]


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by ``path`` under ``master_seed``."""
    if master_seed < 0:
        raise ValueError("master seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, path)]))
