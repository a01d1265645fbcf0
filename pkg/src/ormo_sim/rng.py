"""
Counter-based random streams.

Every random draw of a run lives in its own cell addressed by
`(seed, stream, worker, request)`. A cell's Philox key is derived with
`numpy.random.SeedSequence(seed, spawn_key=(stream, worker, request))`, so a
cell never depends on how many other cells were consumed before it. Changing
`T` or the optimizer therefore leaves every earlier compute time and sample
untouched.
"""

from enum import IntEnum

import numpy as np

from .exceptions import SimConfigError

SEED_LIMIT: int = 2**64


class Stream(IntEnum):
    """Stream identifiers of the spawn key."""

    COMPUTE = 0
    DATA = 1
    INIT = 2
    PROBLEM = 3
    HOLDOUT = 4


def check_seed(seed: int, /) -> int:
    """
    Validate a 64-bit run seed.

    Raises:
        * `SimConfigError`: If `seed` is not an integer in `[0, 2**64)`
    """

    if isinstance(seed, bool) or not isinstance(seed, int | np.integer):
        raise SimConfigError(f"Seed `{seed!r}` is not an integer", service="rng")
    if not 0 <= int(seed) < SEED_LIMIT:
        raise SimConfigError(
            f"Seed `{seed}` is outside the 64-bit range [0, 2**64)", service="rng"
        )
    return int(seed)


def stream(
    seed: int, kind: Stream, /, worker: int = 0, request: int = 0
) -> np.random.Generator:
    """Generator for one `(kind, worker, request)` cell of `seed`."""

    seq: np.random.SeedSequence = np.random.SeedSequence(
        entropy=check_seed(seed), spawn_key=(int(kind), worker, request)
    )
    key: np.ndarray = seq.generate_state(n_words=2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
