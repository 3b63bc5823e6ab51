"""Deterministic RNG fan-out from a single master seed.

Every random decision in a run derives its generator from
(master_seed, purpose, *indices).  Purposes are independent streams, so
adding a new consumer (say, an extra metric) never perturbs the draws of
existing ones.
"""

import zlib

import numpy as np


def derive_rng(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return a Generator keyed by (master_seed, purpose, indices)."""
    code = zlib.crc32(purpose.encode("utf-8"))
    entropy = [int(master_seed), code, *[int(i) for i in indices]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
