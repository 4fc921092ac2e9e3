import numpy as np


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based stream for (seed, *keys), independent of call order."""
    entropy = [int(seed), *(int(k) for k in keys)]
    if any(value < 0 for value in entropy):
        msg = f"RNG keys must be non-negative, got {entropy}"
        raise ValueError(msg)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
