"""Seeded random streams.

All randomness goes through :func:`make_rng`, which builds a counter-based
Philox generator keyed by a root seed and an arbitrary path of integers.
Distinct paths give statistically independent streams, so a training step,
an evaluation task or a worker thread can each own a stream that depends
only on ``(seed, path)`` and never on what ran before it.
"""

import numpy as np


def make_rng(seed, *path):
    """Return a Philox ``Generator`` for the stream ``seed/path...``."""
    if seed is None:
        raise ValueError("a seed is required")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


# stream identifiers, so call sites never collide by accident
STREAM_INIT = 1
STREAM_TRAIN = 2
STREAM_EVAL = 3
STREAM_ORACLE = 4
STREAM_BENCH = 5
