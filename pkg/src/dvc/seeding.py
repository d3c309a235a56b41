"""Hierarchical deterministic seeding.

Every command draws from one root seed; per-object / per-trial generators are
derived by hashing stable labels, so adding parallelism or reordering work
never shifts the random streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(root: int, *labels) -> int:
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(child_seed(root, *labels))
