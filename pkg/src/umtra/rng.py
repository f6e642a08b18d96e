"""Counter-based random streams.

A stream is addressed by ``(master_seed, stream_id, domain)``.  Streams are
Philox generators keyed by the first two and started at a counter whose top
word is the domain, so draws never depend on construction order and unrelated
consumers (episodes, evaluation tasks, initialization, ...) never overlap.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1

EPISODE = 0
EVAL = 1
INIT = 2
GLYPH = 3
SNAPSHOT = 4
SPLIT = 5
MONTE_CARLO = 6
TOY = 7


def stream(master_seed: int, stream_id: int = 0, domain: int = EPISODE) -> np.random.Generator:
    bitgen = np.random.Philox(
        key=np.array([master_seed & _MASK, stream_id & _MASK], dtype=np.uint64),
        counter=np.array([0, 0, 0, domain & _MASK], dtype=np.uint64),
    )
    return np.random.Generator(bitgen)


def episode_stream(master_seed: int, iteration: int, task_index: int, meta_batch: int) -> np.random.Generator:
    """Stream for task ``task_index`` of meta-iteration ``iteration``."""
    return stream(master_seed, iteration * meta_batch + task_index, EPISODE)
