"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream key, counter)``, so the order
in which devices are simulated never changes what any of them sees, and a
resumed run needs no generator state.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

_TWO_POW_53 = float(2**53)


def stream_code(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _key(parts: tuple) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(stream_code(p))
        else:
            p = int(p)
            if p < 0:
                raise ValueError(f"stream key parts must be non-negative, got {p}")
            out.append(p)
    return out


@dataclass(frozen=True)
class RngStream:
    """Independent stream identified by a seed and a key such as ``("online", 17)``."""

    seed: int
    key: tuple = ()

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(parts))

    def _sequence(self, counter: int | None) -> np.random.SeedSequence:
        spawn = _key(self.key if counter is None else self.key + (counter,))
        return np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=spawn)

    def uniform(self, counter: int) -> float:
        """Uniform draw in [0, 1) for the given counter value."""
        word = self._sequence(counter).generate_state(1, np.uint64)[0]
        return float(int(word) >> 11) / _TWO_POW_53

    def generator(self, counter: int | None = None) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._sequence(counter)))
