"""Labeled seed derivation so each random purpose gets its own stream."""

import zlib

import numpy as np


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for ``(seed, *labels)``; labels may be strings or ints."""
    words = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            words.append(zlib.crc32(label.encode()))
        else:
            words.append(int(label) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))
