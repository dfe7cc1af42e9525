import numpy as np

SEED_SPACE = 2**31 - 1


def spawn_seeds(seed, count):
    """``count`` child seeds drawn deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    return [int(value) for value in rng.integers(0, SEED_SPACE, size=count)]
