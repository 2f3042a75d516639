"""Seeded random streams.

Every stochastic call site asks for its own stream by label. Streams are
Philox (counter-based) generators keyed by a hash of ``(seed, label)``, so
adding a new labelled site never shifts the draws of an existing one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, label)))
