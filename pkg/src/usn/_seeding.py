"""Stream splitting for reproducible runs.

Every random consumer draws from its own generator, derived from one master
integer plus a fixed stream tag, so that adding a consumer never perturbs the
numbers seen by another one.
"""

import numpy as np

PATTERN = 0
INIT = 1
SHUFFLE = 2
DROPOUT = 3
SPLIT = 4
REPLICATE = 5
FIXED_TOPOLOGY = 6

_MASK64 = (1 << 64) - 1


def as_u64(seed):
    return int(seed) & _MASK64


def derive_seed(seed, stream, *index):
    """Return a 64-bit child seed for ``stream`` (and optional sub-indices)."""
    ss = np.random.SeedSequence([as_u64(seed), stream, *[int(i) for i in index]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed, stream=None, *index):
    if stream is None:
        return np.random.Generator(np.random.PCG64(as_u64(seed)))
    return np.random.Generator(np.random.PCG64(derive_seed(seed, stream, *index)))
