"""Deterministic RNG stream derivation.

Every stochastic component in the simulator draws from a numpy Generator
derived from a tuple of labels (seeds, regime names, task ids, ...). The
derivation hashes the canonical repr of the tuple with SHA-256, so streams
are stable across processes, platforms and parallelism degree.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of labels to a 64-bit seed, deterministically."""
    canon = "\x1f".join(_canon(p) for p in parts)
    digest = hashlib.sha256(canon.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    """A fresh Generator for the stream identified by `parts`."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def _canon(part) -> str:
    if isinstance(part, (np.integer,)):
        part = int(part)
    if isinstance(part, (np.floating,)):
        part = float(part)
    if isinstance(part, float) and part == int(part):
        part = int(part)
    return f"{type(part).__name__}:{part!r}"
