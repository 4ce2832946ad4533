"""Per-sample random streams.

Augmentation needs fresh randomness per (epoch, sample) while staying
reproducible and independent of worker scheduling, so every sample gets
its own generator derived from the triple (global_seed, epoch, index).
Identical triples always yield identical draws; distinct triples yield
statistically independent streams (numpy SeedSequence guarantees).
"""

import numpy as np


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent generator for one sample of one epoch."""
    ss = np.random.SeedSequence(entropy=[int(seed), int(epoch), int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def stream_rng(seed: int, purpose: str) -> np.random.Generator:
    """Named auxiliary stream (e.g. epoch shuffling), derived from seed."""
    tag = int.from_bytes(purpose.encode("utf-8")[:8].ljust(8, b"\0"), "big")
    ss = np.random.SeedSequence(entropy=[int(seed), tag])
    return np.random.Generator(np.random.PCG64(ss))
