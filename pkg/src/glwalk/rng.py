"""Counter-based random streams keyed by (master seed, purpose, replica).

Every replica draws from its own Philox stream.  The key is derived from the
master seed, a purpose tag and the replica index through ``SeedSequence``, so
a replica's draws never depend on how replicas are grouped or scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["purpose_tag", "stream", "streams"]


def purpose_tag(name: str, *index: int) -> tuple[int, ...]:
    """Stable integer tag for a named purpose (e.g. ``"calibration"``)."""
    return (zlib.crc32(name.encode("utf8")), *(int(i) for i in index))


def stream(seed: int, replica: int, tag: tuple[int, ...] = (0,)) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(*tag, int(replica)))
    return np.random.Generator(np.random.Philox(ss))


def streams(seed: int, replicas: range, tag: tuple[int, ...] = (0,)) -> list[np.random.Generator]:
    return [stream(seed, r, tag) for r in replicas]
