"""Deterministic keyed random streams.

Everything that draws randomness (weight init, scene synthesis, augmenters,
target sampling) derives an independent generator from a structured key, so
results never depend on call order or worker count. String components are
folded in via crc32, which is stable across processes and Python versions.
"""

from __future__ import annotations

import zlib

import numpy as np


def _fold(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(*key):
    """Generator keyed by a tuple of ints/strings."""
    return np.random.default_rng([_fold(p) for p in key])
