"""Deterministic hierarchical random-number streams.

Every stochastic stage of the pipeline draws from its own stream, derived
from a single master seed through a tree of 64-bit stream ids.  Because the
derivation is a pure function, any subtree can be regenerated in isolation
and work can be farmed out to parallel workers without changing a single
draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# SplitMix64 constants.  These are normative for the on-disk manifests: a
# recorded (seed, path) pair must reproduce the same child seeds forever.
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def derive_seed(parent: int, stream_id: int) -> int:
    """Derive a child seed from ``parent`` and ``stream_id``.

    Applies the SplitMix64 finalizer to ``parent XOR (stream_id * gamma)``.
    Pure: the same pair always yields the same child seed.
    """
    z = (parent ^ ((stream_id * _GAMMA) & _MASK64)) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """A node in the seed-derivation tree.

    A stream should either be forked into children via :meth:`child` or
    consumed by a single :meth:`generator` call, never both for independent
    purposes: ``generator()`` is pure, so two generators taken from the same
    stream produce identical draws.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", self.seed & _MASK64)

    def child(self, stream_id: int) -> "RngStream":
        """Fork a child stream for the given 64-bit id."""
        sid = stream_id & _MASK64
        return RngStream(derive_seed(self.seed, sid), self.path + (sid,))

    def generator(self) -> np.random.Generator:
        """A fresh PCG64 generator seeded from this stream."""
        return np.random.Generator(np.random.PCG64(self.seed))
