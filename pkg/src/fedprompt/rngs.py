"""Deterministic RNG stream derivation.

Every stochastic component draws from a generator derived from
(entropy, named stream, *indices), so results never depend on execution
order or scheduling.
"""

import numpy as np

# Stream tags. Values are arbitrary but frozen: changing them changes
# every derived stream.
ENCODER = 1
VOCAB = 2
HANDCRAFTED = 3
PROMPT_INIT = 4
DATA = 5
SPLIT = 6
PARTITION = 7
CLIENT = 8
SAMPLING = 9
LOCAL_MAP = 10
SHIFT = 11
TVT = 12  # train/val/test split


def derive_rng(entropy: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (entropy, *key)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy, spawn_key=tuple(key)))
