"""Stable child-seed derivation.

A child seed depends only on the root seed and a purpose string, so adding a
new random stream never shifts the values drawn by existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np


def child_seed(root: int, purpose: str) -> int:
    digest = hashlib.blake2b(f"{int(root)}:{purpose}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def child_rng(root: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(root, purpose))
