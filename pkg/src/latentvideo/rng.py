"""Labeled random streams derived from a single root seed.

Every stochastic component draws from its own stream, derived by hashing
(root seed, label). Adding a new stage or reordering stages therefore
never perturbs the random numbers seen by existing stages.
"""

from __future__ import annotations

import hashlib

import torch

_MASK63 = (1 << 63) - 1


def derive_seed(root_seed: int, label: str) -> int:
    """Map (root seed, label) to a stable 63-bit stream seed."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def stream(root_seed: int, label: str) -> torch.Generator:
    """Fresh CPU generator for the labeled stream."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(root_seed, label))
    return gen
