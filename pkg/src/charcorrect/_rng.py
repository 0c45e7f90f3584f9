"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "data", "init", "dropout", "shuffle")."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
