"""Deterministic seed derivation.

A single run seed fans out into per-stage and per-task seeds through one
splitmix64 step over ``seed XOR fnv1a(label) XOR index * GOLDEN``. Every
stage of a pipeline is therefore replayable in isolation: knowing the run
seed and the stage label is enough to reconstruct that stage's stream.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One splitmix64 output step; maps any int to a well-mixed 64-bit value."""
    z = (state + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _fnv1a64(text: str) -> int:
    acc = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        acc = ((acc ^ byte) * 0x100000001B3) & _MASK
    return acc


def derive_seed(seed: int, label: str, index: int = 0) -> int:
    """Derive the seed for stage `label` (and optional per-item `index`)."""
    return splitmix64((seed & _MASK) ^ _fnv1a64(label) ^ ((index * _GOLDEN) & _MASK))
