"""Named random substreams derived from one root seed.

Each stage draws from its own stream (``data``, ``split``, ``mask``, ``init``,
``shuffle``, ``dropout``, ``bootstrap``, ``shap``) so that changing how much
randomness one stage consumes never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "split", "mask", "init", "shuffle", "dropout", "bootstrap", "shap")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for ``name`` under root ``seed``, optionally keyed further by ints."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_key(name), *map(int, extra)]))


def derive_seed(seed: int, name: str, *extra: int) -> int:
    """A plain integer seed for APIs that take ints rather than generators."""
    return int(substream(seed, name, *extra).integers(0, 2**31 - 1))
