"""Named random substreams derived from a single master seed.

Every source of randomness in the pipeline pulls its generator from
``substream(master_seed, *names)``. Names are hashed with a stable digest
(not Python's salted ``hash``), so the same (seed, names) pair yields the
same stream on any platform or process, and independently named streams
never collide no matter what order stages run in.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.blake2b(str(name).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master_seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=tuple(_name_key(n) for n in names)
    )


def substream(master_seed: int, *names) -> np.random.Generator:
    """A PCG64 generator for the substream named by ``names``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *names)))


def torch_seed(master_seed: int, *names) -> int:
    """A 63-bit integer seed for torch, derived from the same naming scheme."""
    return int(seed_sequence(master_seed, *names).generate_state(1, np.uint64)[0] >> 1)
