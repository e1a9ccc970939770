"""Per-purpose random streams derived from one master seed.

Each purpose gets its own ``numpy.random.Generator`` seeded from
``SeedSequence([seed, purpose_code, *extra])``.  Switching one stochastic
component on or off therefore never shifts the draws of another one.
"""

from __future__ import annotations

import numpy as np

DEFAULT_SEED = 2019

# fixed codes, never reorder: they are part of the reproducibility contract
PURPOSES = {
    "init": 1,
    "noise": 2,
    "dropout": 3,
    "data": 4,
    "shuffle": 5,
    "jitter": 6,
    "codebook": 7,
}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    try:
        code = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown random stream purpose {purpose!r}") from None
    ss = np.random.SeedSequence([int(seed), code, *(int(e) for e in extra)])
    return np.random.Generator(np.random.PCG64(ss))


class Streams:
    """Lazily created generators for init, noise, dropout and data."""

    def __init__(self, seed: int = DEFAULT_SEED):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getattr__(self, name):
        if name.startswith("_") or name not in PURPOSES:
            raise AttributeError(name)
        gen = self._gens.get(name)
        if gen is None:
            gen = self._gens[name] = stream(self.seed, name)
        return gen

    def epoch_shuffle(self, epoch: int) -> np.random.Generator:
        """Fresh generator for batch order of one epoch (independent of the others)."""
        return stream(self.seed, "shuffle", epoch)
