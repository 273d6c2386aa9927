"""Reproducible, independent random streams.

A stream is addressed by ``(seed, stream_id, purpose)``; distinct addresses give
statistically independent ``numpy`` generators (``SeedSequence`` spawn keys), so
replicate paths can be generated in any order or batch size with identical
results.
"""
import numpy as np

INITIAL = 0
FACTOR_NOISE = 1
DISCOUNT_NOISE = 2


def stream(seed: int, stream_id: int = 0, purpose: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id), int(purpose)))
    return np.random.Generator(np.random.PCG64(ss))
