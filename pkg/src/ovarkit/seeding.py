"""Named deterministic RNG streams.

Every consumer derives its own stream from (run seed, stream name), so adding
or reordering one consumer never perturbs the draws seen by another.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def stream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def torch_gen(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(seed, name))
    return g


def py_rng(seed: int, name: str) -> random.Random:
    return random.Random(stream_seed(seed, name))


def np_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, name)))
