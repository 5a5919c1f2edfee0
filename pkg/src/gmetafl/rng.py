"""Counter-based random streams.

Every stream is derived from a tuple of integers (global seed, client id,
round, purpose tag), so the draws a client sees never depend on how many
other clients ran before it or on which worker thread executes it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


class RngStream:
    """A numpy Generator that counts how many batches were drawn from it."""

    def __init__(self, *key: int | str):
        entropy = [_tag(k) if isinstance(k, str) else int(k) for k in key]
        self.key = tuple(key)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        self.draws = 0

    def integers(self, high: int, size: int) -> np.ndarray:
        self.draws += 1
        return self.generator.integers(0, high, size=size)

    def state(self):
        return self.generator.bit_generator.state

    def __repr__(self):
        return f"RngStream(key={self.key}, draws={self.draws})"


@dataclass
class LocalStreams:
    """Batch sources for one client's local updates.

    ``grad`` feeds the fine-tuning and final-gradient batches, ``hess`` the
    Hessian (or perturbed-gradient) batches.
    """

    grad: RngStream
    hess: RngStream

    @classmethod
    def derive(cls, seed: int, client_id: int, round_: int) -> "LocalStreams":
        return cls(RngStream(seed, client_id, round_, "grad"), RngStream(seed, client_id, round_, "hess"))

    @property
    def draws(self) -> tuple[int, int]:
        return self.grad.draws, self.hess.draws
