"""Seeded counter-based random streams.

Every stochastic routine takes a ``numpy.random.Generator``; parallel work
receives child streams from :func:`split`, so results do not depend on how
the work is scheduled.
"""

from __future__ import annotations

import os

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Philox (counter-based, 64-bit) generator for ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """``n`` independent child streams of ``rng``."""
    return rng.spawn(n)


def max_threads() -> int:
    """Worker cap from ``CRITSAMPLER_THREADS`` (default: CPU count)."""
    raw = os.environ.get("CRITSAMPLER_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
