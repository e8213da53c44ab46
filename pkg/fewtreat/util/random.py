import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    """A Philox generator that depends only on ``seed`` and ``key``.

    Two calls with the same arguments always produce the same stream,
    whichever worker makes the call.
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(sequence))


def derived_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``key``"""
    state = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0] >> np.uint64(1))
