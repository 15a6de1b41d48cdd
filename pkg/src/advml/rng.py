"""Seeded random streams.

Every random draw in the package comes from a :class:`numpy.random.Generator`
(PCG64). Independent streams are derived from one top-level seed by mixing in
a string label, so adding a new consumer never shifts existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    """Generator for ``seed``, or for the child stream ``label`` under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if label is not None:
        entropy += _label_words(label)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(seed: int, label: str) -> int:
    """Integer seed of the child stream, for configs that carry plain seeds."""
    return int(make_rng(seed, label).integers(0, 2**63 - 1))
