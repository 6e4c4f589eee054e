"""Keyed, counter-based random streams.

Every noise draw in the library is addressed by a (master_seed, stream_key)
pair, where the key is a tuple like ("item_rhs", iteration, item_index).
Distinct keys map to independent Philox states through a keyed hash, so the
same draw can be reproduced regardless of the order in which workers request
it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


def _canonical(part) -> int | str:
    """Normalize a key part so equal keys hash equally (np.int64(3) == 3)."""
    if isinstance(part, str):
        return part
    if isinstance(part, (bool, float)):
        raise TypeError(f"stream key parts must be ints or strings, got {part!r}")
    try:
        return int(part)
    except (TypeError, ValueError):
        raise TypeError(f"stream key parts must be ints or strings, got {part!r}")


def _philox_key(master_seed: int, stream_key: tuple) -> np.ndarray:
    seed_bytes = (int(master_seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    payload = repr(stream_key).encode("utf-8")
    digest = hashlib.blake2b(payload, key=seed_bytes, digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64)


@dataclass(frozen=True)
class RngStream:
    """Immutable descriptor of one random stream.

    The same (master_seed, stream_key) always yields the identical sample
    sequence; every ``child`` extends the key, giving an independent stream.
    """

    master_seed: int
    stream_key: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(
            self, "stream_key", tuple(_canonical(p) for p in self.stream_key)
        )

    def child(self, *key_parts) -> "RngStream":
        return RngStream(self.master_seed, self.stream_key + key_parts)

    def generator(self) -> np.random.Generator:
        key = _philox_key(self.master_seed, self.stream_key)
        return np.random.Generator(np.random.Philox(key=key))

    def derived_seed(self) -> int:
        """A plain integer seed derived from this stream's identity."""
        key = _philox_key(self.master_seed, self.stream_key)
        return int(key[0])

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        """I.i.d. zero-mean Gaussians; std == 0 short-circuits to zeros."""
        if std < 0:
            raise ValueError("std must be nonnegative")
        if std == 0:
            return np.zeros(size, dtype=np.float64)
        return self.generator().normal(0.0, std, size=size)

    def uniform(self, size) -> np.ndarray:
        return self.generator().random(size=size)

    def unit_vector(self, dim: int) -> np.ndarray:
        gen = self.generator()
        v = gen.normal(size=dim)
        nrm = np.linalg.norm(v)
        while nrm == 0.0:  # probability-zero guard
            v = gen.normal(size=dim)
            nrm = np.linalg.norm(v)
        return v / nrm
