"""Counter-based random streams.

A draw is addressed by ``(seed, stream label, counter)``: the seed and a hash
of the label form the Philox key, the counter selects a disjoint block of the
Philox counter space. Two streams never share a key, so data generation, noise
draws and guidance-scale draws stay reproducible regardless of call order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class Rng:
    seed: int
    stream: str = "root"
    counter: int = 0

    def child(self, label) -> "Rng":
        """Independent stream derived from this one's label; starts at counter 0."""
        return Rng(self.seed, f"{self.stream}/{label}", 0)

    def generator(self) -> np.random.Generator:
        """Generator for the current counter; advances the counter by one."""
        key = np.array([self.seed & _MASK64, _label_hash(self.stream)], dtype=np.uint64)
        counter = np.array([0, 0, self.counter & _MASK64, 0], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(int(state["seed"]), str(state["stream"]), int(state["counter"]))


def gaussian(rng: Rng, shape) -> np.ndarray:
    """I.i.d. standard normal draws; one counter tick per call."""
    return rng.generator().standard_normal(shape)


def uniform(rng: Rng, shape=None, low: float = 0.0, high: float = 1.0):
    return rng.generator().uniform(low, high, shape)


def integers(rng: Rng, low: int, high: int, shape=None):
    return rng.generator().integers(low, high, shape)
