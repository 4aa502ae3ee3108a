"""Stable seed derivation so every run, fold and cell gets an independent stream."""
import hashlib

import numpy as np


def derive_seed(master_seed: int, descriptor: str) -> int:
    """64-bit seed from ``sha256("<master_seed>|<descriptor>")``.

    Independent of Python's hash randomization and of call order.
    """
    digest = hashlib.sha256(f"{int(master_seed)}|{descriptor}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master_seed: int, descriptor: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, descriptor))


def check_random_state(seed) -> np.random.Generator:
    """Accept None, an int seed or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
