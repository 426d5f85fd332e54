"""Deterministic RNG derivation: one master seed, named independent streams."""

import zlib

import numpy as np


def derive_seed_sequence(master_seed, *tags):
    """Stable SeedSequence for (master_seed, tags); tags may be str or int."""
    entropy = [int(master_seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode()))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed, *tags):
    return np.random.default_rng(derive_seed_sequence(master_seed, *tags))
