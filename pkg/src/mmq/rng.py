"""Named random sub-streams derived from one root seed.

``stream(seed, "episodes", "round2")`` always yields the same generator,
independent of how many other streams were drawn before it.
"""

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    keys = [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**63, *keys]))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))
