"""Named sub-seeds derived from a single top-level seed."""

import zlib

import numpy as np


def sub_seed(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    # crc32 keeps the mapping stable across interpreter runs (hash() is salted)
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8")), *map(int, extra)])


def rng_for(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, name, *extra))
