"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(master_seed, *path)``, where
``path`` names the work item (experiment index, block of trajectories, ...).
Streams never depend on which thread runs the work or in what order, so
aggregate outputs are reproducible under any parallel schedule.
"""

from __future__ import annotations

import numpy as np

# Trajectories are drawn in fixed-size blocks, one stream per block. The size
# is part of the reproducibility contract: changing it changes every output.
BLOCK_SIZE = 4096


def stream(seed: int, *path: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def blocks(n: int, block_size: int = BLOCK_SIZE):
    """``(index, start, stop)`` for each block covering ``range(n)``."""
    for b, start in enumerate(range(0, n, block_size)):
        yield b, start, min(n, start + block_size)
