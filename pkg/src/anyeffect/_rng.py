"""Counter-based seed derivation.

Every random decision in the package flows through a (seed, tags...)
derivation so that draw i is reproducible without generating draws
1..i-1 and parallel workers produce output identical to a serial run.
"""

from __future__ import annotations

import numpy as np

_MASK63 = (1 << 63) - 1


def _sequence(seed: int, tags: tuple[int, ...]) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(seed) & _MASK63,
        spawn_key=tuple(int(t) & 0xFFFFFFFF for t in tags),
    )


def derive_seed(seed: int, *tags: int) -> int:
    """Hash (seed, tags...) into a fresh 64-bit seed."""
    hi, lo = _sequence(seed, tags).generate_state(2, np.uint32)
    return (int(hi) << 32) | int(lo)


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Generator seeded from (seed, tags...); independent across tags."""
    return np.random.default_rng(_sequence(seed, tags))


def kernel_seed(seed: int, *tags: int) -> int:
    """32-bit seed for the numba kernels, derived like derive_seed."""
    return int(_sequence(seed, tags).generate_state(1, np.uint32)[0])
