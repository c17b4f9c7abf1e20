"""Deterministic derivation of independent RNG streams."""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a 64-bit seed.

    Used for every per-trial, per-member and per-image stream so that work can be
    fanned out in any order without changing results.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
