"""Named random substreams derived from one master seed.

Every stochastic component pulls its generator through ``substream`` so that
enabling one pipeline stage never perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(master_seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream; stable across runs and platforms."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, tag]))


def substream_seed(master_seed: int, name: str, index: int = 0) -> int:
    """Derived integer seed, for components that take a seed rather than a Generator."""
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, tag, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)
