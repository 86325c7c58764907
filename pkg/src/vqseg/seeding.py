"""Named random substreams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for (seed, name, *extra); same inputs give the same stream."""
    return np.random.default_rng([int(seed), stream_key(name), *map(int, extra)])


def subseed(seed: int, name: str) -> int:
    """A plain integer seed for APIs that take one."""
    return int(np.random.SeedSequence([int(seed), stream_key(name)]).generate_state(1)[0])
