"""Named random streams derived from one master seed.

Every random draw in a run comes from `np.random.default_rng(derive_seed(...))`
with a stream name and integer counters, so enabling one feature never shifts
another feature's randomness and no generator state needs checkpointing.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("init", "warmup", "order", "rollout", "eval", "probe", "mask", "dr", "task", "forgetting")


def _stream_key(stream: str) -> int:
    digest = hashlib.sha256(stream.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(master_seed: int, stream: str, *counters: int) -> int:
    """Derive a 64-bit seed for `stream` at position `counters`.

    Args:
        master_seed (int): the experiment's master seed
        stream (str): one of `STREAMS`
        *counters (int): nonnegative integers locating the draw, e.g. (epoch, step)

    Returns:
        int: a seed suitable for `np.random.default_rng`

    Raises:
        ValueError: unknown stream or negative counter
    """
    if stream not in STREAMS:
        raise ValueError(f"unknown random stream '{stream}'")
    if any(int(c) < 0 for c in counters):
        raise ValueError("counters must be nonnegative")
    seq = np.random.SeedSequence(
        entropy=int(master_seed) & (2**64 - 1),
        spawn_key=(_stream_key(stream),) + tuple(int(c) for c in counters),
    )
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def stream_rng(master_seed: int, stream: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, stream, *counters))
