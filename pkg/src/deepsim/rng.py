"""Seed-derived random streams.

Each consumer (parameter init, data sampling, dropout, latent noise, ...)
draws from its own PCG64 stream spawned from the master seed and the
consumer's name, so enabling one consumer never shifts another's sequence.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


class Streams:
    """Named generators derived lazily from one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]

    def get_state(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in sorted(self._streams.items())}

    def set_state(self, states: dict) -> None:
        for name, state in states.items():
            self[name].bit_generator.state = state
