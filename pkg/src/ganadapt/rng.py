"""Deterministic seed derivation.

Every stochastic routine in the package takes an explicit integer seed and
builds its own generator; nothing reads global RNG state. Sub-seeds are
derived by hashing so that unrelated consumers of one run seed never share
a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, tag: str) -> int:
    """Stable 31-bit sub-seed for (seed, tag), identical across platforms."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def torch_gen(seed: int, tag: str = "") -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, tag) if tag else seed)
    return g


def np_gen(seed: int, tag: str = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag) if tag else seed)
