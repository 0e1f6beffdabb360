"""Seeded, counter-based random streams.

Every random draw in the library goes through :func:`make_rng`, which builds a
``numpy.random.Generator`` on the Philox4x64 counter-based bit generator. The
seed is expanded with ``numpy.random.SeedSequence``; extra integers passed as
``stream`` become the sequence's spawn key, so ``make_rng(seed, N, s)`` gives an
independent, reproducible stream for sweep cell ``(N, s)`` regardless of the
order in which cells are evaluated.
"""

import numpy as np

from .errors import InputError

SEED_MAX = 2**64 - 1


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed <= SEED_MAX:
        raise InputError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def make_rng(seed, *stream):
    seq = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))
