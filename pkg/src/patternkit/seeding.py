"""Deterministic seed derivation for replicates, folds and completions."""

from __future__ import annotations

import numpy as np


def derive_seed(master_seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent stream identified by ``(master_seed, *keys)``."""
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))


def derive_rng(master_seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *keys))


def as_rng(rng=None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
