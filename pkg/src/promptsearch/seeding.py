"""Deterministic RNG derivation; all randomness in the package flows from here."""

import numpy as np

# Stable stream tags so independent components never share a stream.
MODEL = 1
TASK = 2
ALPHA = 3
PROMPTS = 4
BATCH = 5
TRAIN = 6


def rng_from(*keys: int) -> np.random.Generator:
    """Generator keyed by a tuple of integers; same keys, same stream."""
    return np.random.default_rng(np.random.SeedSequence(list(keys)))
