"""Counter-based random streams keyed by integer tuples.

Each stream is a Philox generator seeded from ``SeedSequence(seed,
spawn_key=key)``, so the stream for (scenario, replicate, bootstrap index)
is the same no matter which worker draws it or in which order.
"""

from __future__ import annotations

import numpy as np


def make_stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def child_stream(rng: np.random.Generator, *key: int) -> np.random.Generator:
    """Stream derived from ``rng``'s own key extended by ``key``.

    ``rng`` must have been built from a SeedSequence (as by :func:`make_stream`
    or ``np.random.default_rng(int)``); drawing from it does not affect the
    child.
    """
    ss = rng.bit_generator.seed_seq
    child = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(child))


def as_stream(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_stream(0 if rng is None else int(rng))
