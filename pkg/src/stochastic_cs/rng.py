"""Seed derivation and replayable Brownian increments.

Realization ``k`` of a run seeded with ``seed`` uses ``derive_seed(seed, k)``,
the XOR of the seed with the splitmix64 finalizer of ``k``.  The finalizer
maps 0 to 0, so realization 0 replays the parent seed itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1

# stream tags keep noise and initial data statistically independent
NOISE_STREAM = 0
INIT_STREAM = 1
LAW_STREAM = 2


def splitmix64_mix(k: int) -> int:
    z = k & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, k: int) -> int:
    return (int(seed) & MASK64) ^ splitmix64_mix(k)


def generator(seed: int, stream: int = NOISE_STREAM) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & MASK64, stream])))


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Scalar Brownian increments dW_k ~ Normal(0, dt), one per step."""

    seed: int
    dt: float
    increments: np.ndarray

    @classmethod
    def generate(cls, seed: int, dt: float, steps: int, stream: int = NOISE_STREAM) -> "NoisePath":
        inc = generator(seed, stream).standard_normal(steps) * np.sqrt(dt)
        return cls(int(seed), float(dt), inc)

    def __len__(self) -> int:
        return len(self.increments)


def noise_matrix(seeds, dt: float, steps: int, stream: int = NOISE_STREAM) -> np.ndarray:
    """Stack the increments of several seeds: shape ``(len(seeds), steps)``."""
    return np.stack([NoisePath.generate(s, dt, steps, stream).increments for s in seeds])
