"""Keyed, counter-based random streams for reproducible simulations.

Every stochastic operation in the testbed draws from a stream derived from
``(master_seed, label, *indices)``. Streams with distinct keys are
statistically independent, and the same key always reproduces the same
stream, so clients inside a round can be trained in any order (or in
parallel) without perturbing results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _label_words(label: str) -> list[int]:
    # Stable across processes, unlike the builtin salted hash().
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 8], "big") for i in (0, 8)]


@dataclass(frozen=True)
class RngStream:
    """Factory of named substreams rooted at a master seed.

    Backed by Philox, a counter-based generator: deriving a stream is a key
    construction, not a jump along one global sequence.
    """

    master_seed: int

    def derive(self, label: str, *indices: int) -> np.random.Generator:
        """Independent generator keyed by (master_seed, label, indices)."""
        if any(i < 0 for i in indices):
            raise ValueError(f"stream indices must be non-negative, got {indices}")
        entropy = [self.master_seed & 0xFFFFFFFFFFFFFFFF, *_label_words(label), *indices]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, label: str, *indices: int) -> "RngStream":
        """Sub-root whose own derivations cannot collide with the parent's."""
        entropy = [self.master_seed & 0xFFFFFFFFFFFFFFFF, *_label_words(label), *indices]
        mixed = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
        return RngStream(int(mixed))
