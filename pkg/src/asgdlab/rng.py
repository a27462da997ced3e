"""Counter-based random streams.

Every random draw in a simulation is keyed by ``(seed, purpose, worker, index)``
so that the value a worker sees for its j-th computation does not depend on how
events from other workers were interleaved.  Philox is used directly: the key
holds the seed and purpose, the upper two counter words hold the worker and the
index, and the lower two words are left free for the draws themselves.
"""

from __future__ import annotations

import numpy as np

GRADIENT = 0
DURATION = 1
BATCH = 2
INIT = 3

_MASK = (1 << 64) - 1


def stream(seed: int, purpose: int, worker: int = 0, index: int = 0) -> np.random.Generator:
    if seed < 0 or worker < 0 or index < 0:
        raise ValueError("seed, worker and index must be non-negative")
    key = np.array([seed & _MASK, purpose & _MASK], dtype=np.uint64)
    counter = np.array([0, 0, index & _MASK, worker & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
