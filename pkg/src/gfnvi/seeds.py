"""Counter-based random streams.

Every stochastic routine in the package draws from a Philox generator keyed
by (seed, purpose, step, index). Streams for different purposes, steps, or
sample indices never overlap, and the values a consumer sees do not depend
on scheduling or worker count: the trainer materialises whole uniform blocks
up front and scatters them to the samplers.
"""

from __future__ import annotations

import numpy as np

# Stable purpose tags. Never renumber: checkpointed runs must replay bit-for-bit.
PURPOSES = {
    "init": 0,
    "forward": 1,
    "backward": 2,
    "eval": 3,
    "mh": 4,
    "dataset": 5,
    "terminal": 6,
    "verify": 7,
    "cd": 8,
}


def _purpose_id(purpose: int | str) -> int:
    if isinstance(purpose, str):
        try:
            return PURPOSES[purpose]
        except KeyError:
            raise ValueError(f"unknown RNG purpose {purpose!r}") from None
    return int(purpose)


def stream(seed: int, purpose: int | str, step: int = 0, index: int = 0) -> np.random.Generator:
    """Return the Philox stream keyed by (seed, purpose, step, index)."""
    key = np.random.SeedSequence(entropy=int(seed), spawn_key=(_purpose_id(purpose), int(step), int(index)))
    return np.random.Generator(np.random.Philox(key))


def uniform_block(seed: int, purpose: int | str, step: int, shape: tuple[int, ...]) -> np.ndarray:
    """Uniforms in [0, 1) for one (seed, purpose, step) key.

    The block layout is part of the determinism contract: element order is
    fixed by the Philox counter, so per-sample slices are stable however the
    block is later consumed.
    """
    return stream(seed, purpose, step).random(shape)
