"""Single-seed discipline: every stochastic component draws from a stream
derived from the run seed and a component name."""
from __future__ import annotations

import zlib

import numpy as np


def component_key(*names: object) -> list[int]:
    return [zlib.crc32(str(n).encode("utf-8")) for n in names]


def derive_rng(seed: int, *names: object) -> np.random.Generator:
    """Independent generator for ``names`` under ``seed``; stable across runs."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *component_key(*names)])
