"""Hierarchical, order-independent random streams.

Every random draw in the package flows from a single root seed through a
path of labels, e.g. ``generator(seed, "aug", epoch, batch, image, slot)``.
Philox is counter-based, so streams at different paths are independent and
the draw order of one path never disturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_entry(item) -> int:
    if isinstance(item, str):
        return zlib.crc32(item.encode("utf-8"))
    return int(item)


def generator(root_seed: int, *path) -> np.random.Generator:
    """Philox generator for the stream addressed by (root_seed, *path)."""
    entropy = (int(root_seed),) + tuple(_path_entry(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive(root_seed: int, *path) -> int:
    """Deterministic integer sub-seed for APIs that take a plain seed."""
    return int(generator(root_seed, *path).integers(0, 2**63))
