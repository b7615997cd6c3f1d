"""Deterministic random-stream derivation for experiments.

Every draw in a run comes from a generator derived as
SeedSequence([root_seed, purpose, *qualifiers]). Purposes that must coincide
across mechanisms for paired comparison (costs, task, partition, initial
weights) take no qualifier; schedule and training-noise streams add the
mechanism tag so mechanisms cannot steal each other's draws. Parallel workers
therefore cannot reorder anything: the stream is a pure function of
(root_seed, purpose, qualifiers).
"""

from __future__ import annotations

import zlib

import numpy as np

COSTS = 1
TASK = 2
PARTITION = 3
INIT = 4
SCHEDULE = 5
NOISE = 6
INTERIM = 7


def mechanism_tag(name: str) -> int:
    """Stable integer tag for a mechanism name (CRC-32 of the string)."""
    return zlib.crc32(name.encode("utf-8"))


def derive(root_seed: int, purpose: int, *qualifiers: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(root_seed), int(purpose),
                                  *(int(q) for q in qualifiers)])
    return np.random.default_rng(seq)
