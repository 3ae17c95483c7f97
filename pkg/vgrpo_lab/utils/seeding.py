"""
Seed derivation for reproducible, batch-order independent randomness.

Every random draw in a run comes from a generator seeded by
``derive_seed(global_seed, stream, *coords)``. The coordinates are mixed with
numpy's SeedSequence, so a rollout for (iteration, prompt, member) gets the same
stream no matter how the batch is ordered or partitioned.
"""
from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Independent seed domains."""
    ROLLOUT = 0
    PAIRS = 1
    PARTITION = 2
    HELDOUT = 3
    PRETRAIN = 4
    MDP_SUBSET = 5
    INIT = 6
    PROMPTS = 7
    DIAGNOSTICS = 8


def derive_seed(global_seed: int, stream: Stream, *coords: int) -> int:
    """
    Mix a global seed, a stream id and integer coordinates into a 63-bit seed.

    Args:
        global_seed: Run-level seed
        stream: Seed domain
        *coords: Non-negative integer coordinates, e.g. (iteration, prompt, member)

    Returns:
        int: Derived seed
    """
    entropy = [int(global_seed) & 0xFFFFFFFF, int(stream)] + [int(c) for c in coords]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def derive_rng(global_seed: int, stream: Stream, *coords: int) -> np.random.Generator:
    """Generator seeded by ``derive_seed``."""
    return np.random.default_rng(derive_seed(global_seed, stream, *coords))
