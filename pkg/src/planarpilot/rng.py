"""Seed plumbing: every random draw in the project flows through here."""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream...); same args, same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))
