"""Deterministic fan-out of one master seed into independent random streams.

Every stochastic consumer gets its own ``numpy.random.Generator`` backed by
the counter-based Philox bit generator.  A stream is identified by the
master seed plus a *spawn key*: a purpose code followed by any sub-indices
(agent id, episode number, ...).  Because streams are derived rather than
split off a shared generator, changing how many draws one consumer makes
never shifts the numbers seen by another.

==============  =====  =====================================
purpose         code   sub-indices
==============  =====  =====================================
topology        1      (none)
fading          2      episode
agent_init      3      agent
explore         4      agent
replay          5      agent
evaluation      6      episode
fresh_users     7      seed-slot block (baselines)
choices         8      seed-slot block (baselines)
==============  =====  =====================================
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "topology": 1,
    "fading": 2,
    "agent_init": 3,
    "explore": 4,
    "replay": 5,
    "evaluation": 6,
    "fresh_users": 7,
    "choices": 8,
}


def make_rng(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator for ``purpose`` (and optional sub-indices)."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown rng purpose {purpose!r}")
    key = (PURPOSES[purpose],) + tuple(int(i) for i in indices)
    seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def as_rng(seed_or_rng) -> np.random.Generator:
    """Accept an integer seed or an existing generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed_or_rng))))
