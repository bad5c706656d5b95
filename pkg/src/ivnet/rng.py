"""Named, counter-based random streams.

One root seed fans out into independent per-purpose streams, so adding a
new consumer (another noise source, another split) never perturbs the
draws of existing ones.  A stream is addressed by ``(root_seed, name,
index)``; the name is hashed into the Philox key, the index selects a
sub-stream (e.g. one per sample or per step).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _purpose_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return the generator for one named stream.

    Deterministic across platforms and process boundaries: the same
    (root_seed, name, index) triple always yields the same draws.
    """
    seq = np.random.SeedSequence(
        entropy=int(root_seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(_purpose_key(name), int(index)),
    )
    return np.random.Generator(np.random.Philox(seq))
