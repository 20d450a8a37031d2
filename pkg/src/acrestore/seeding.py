"""Namespaced, order-independent random streams derived from one seed."""

from __future__ import annotations

import os
import zlib

import numpy as np

DEFAULT_SEED = 0


def default_seed() -> int:
    """Seed used when none is given; ``ACRESTORE_SEED`` overrides it."""
    env = os.environ.get("ACRESTORE_SEED")
    return int(env) if env not in (None, "") else DEFAULT_SEED


def _word(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode())


def make_rng(seed: int, namespace: str, *keys) -> np.random.Generator:
    """Generator for ``(seed, namespace, *keys)``; distinct keys give independent streams."""
    return np.random.default_rng(np.random.SeedSequence([_word(seed), _word(namespace), *map(_word, keys)]))
