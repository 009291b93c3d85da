"""Named random streams derived from a single run seed.

Each consumer (augmentation, step sampling, noise draws, ...) asks for its own
stream by name, so switching one component off never shifts the draws seen by
another.
"""

import zlib

import numpy as np


class RandomStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        rng = self._streams.get(name)
        if rng is None:
            ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode("utf-8"))])
            rng = self._streams[name] = np.random.default_rng(ss)
        return rng

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator for ``name`` that does not advance the cached one."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(name.encode("utf-8"))]))
