"""Named, independent random streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for ``name`` that does not depend on any other stream.

    Streams are keyed on ``(seed, crc32(name))`` so adding a new consumer never
    shifts the draws seen by existing ones.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


class RngStreams:
    """Lazily created named generators sharing one seed.

    >>> rs = RngStreams(0)
    >>> a = rs["init"].normal()
    >>> RngStreams(0)["init"].normal() == a
    True
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = self._streams[name] = stream(self.seed, name)
        return gen

    def child(self, name: str) -> RngStreams:
        """A new family of streams, e.g. one per fold or replica."""
        return RngStreams(int(self[f"child:{name}"].integers(0, 2**31 - 1)))
