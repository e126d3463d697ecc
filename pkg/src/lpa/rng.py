"""Counter-based random streams.

Every random draw in the package comes from ``stream(root_seed, component, *keys)``:
a Philox generator keyed by a SeedSequence over the root seed, a CRC32 of
the component name and the integer keys (prompt index, sample index, ...).
Streams never depend on the order in which they are created.
"""
from __future__ import annotations

import zlib

import numpy as np


def component_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, component: str, *keys: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed), component_id(component), *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
