"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "rng", "derive_seed"]


def _key(names) -> tuple:
    return tuple(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) for n in names)


def stream(seed: int, *names) -> np.random.SeedSequence:
    """Seed sequence for the sub-stream ``names`` (strings or ints) of ``seed``."""
    return np.random.SeedSequence(int(seed), spawn_key=_key(names))


def rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(stream(seed, *names))


def derive_seed(seed: int, *names) -> int:
    """Integer seed for components that take a plain seed (e.g. the sampler)."""
    return int(stream(seed, *names).generate_state(1, np.uint32)[0])
