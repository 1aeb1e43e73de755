"""Deterministic seed derivation for every randomized component.

All randomness in the toolkit flows through :class:`RngPlan`. A plan holds a
single 64-bit root seed; each component derives a child seed from
``(root_seed, tag, index)`` with a fixed integer mixing function, so the same
plan reproduces the same streams on any platform and at any worker count.

The mixer is the splitmix64 finalizer (Steele, Lea & Flood's published
constants) applied to the root seed combined with an FNV-1a hash of the tag
and the index. Any published 64-bit finalizer would do; this one is documented
here so the derivation is auditable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 finalizer round; pure 64-bit integer mixing."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    """FNV-1a hash of a UTF-8 string, 64-bit."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


@dataclass(frozen=True)
class RngPlan:
    """Root seed plus the documented child-seed derivation rule.

    Child seeds are ``splitmix64(splitmix64(root ^ fnv1a64(tag)) ^ index)``.
    Identical ``(root_seed, tag, index)`` yields the identical child seed in
    every process, which is what makes concurrent training runs bit-stable.
    """

    root_seed: int

    def __post_init__(self):
        if not 0 <= self.root_seed <= _MASK64:
            raise ValueError(f"root_seed must be a 64-bit integer, got {self.root_seed}")

    def child_seed(self, tag: str, index: int = 0) -> int:
        if index < 0:
            raise ValueError(f"index must be non-negative, got {index}")
        mixed = splitmix64(self.root_seed ^ fnv1a64(tag))
        return splitmix64(mixed ^ (index & _MASK64))

    def generator(self, tag: str, index: int = 0) -> np.random.Generator:
        """A fresh PCG64 generator seeded with the derived child seed."""
        return np.random.Generator(np.random.PCG64(self.child_seed(tag, index)))

    def child(self, tag: str, index: int = 0) -> "RngPlan":
        """A nested plan rooted at the derived child seed."""
        return RngPlan(self.child_seed(tag, index))
