"""Hierarchical seeding: one root seed, an independent stream per named component."""

import zlib

import numpy as np


def child_rng(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
