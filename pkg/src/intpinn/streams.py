"""Purpose-isolated random streams.

Every random draw in an experiment comes from a generator keyed by
``(seed, label)``.  Two runs that share a seed therefore share, for example,
their network initialisation and volume sequence even when they consume
different numbers of draws for other purposes.
"""

from __future__ import annotations

import hashlib

import numpy as np

LABELS = ("init", "volumes", "points", "eval", "excess", "ic")


def label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Counter-based generator for one purpose within one seed."""
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, label_key(label)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
