"""Seed derivation and counter-based gaussian streams.

A stream is identified by a tuple of non-negative integers (a *seed path*),
e.g. ``(run_seed, party, round, tensor_id)``. The path is folded into a 64-bit
key with the SplitMix64 finalizer; draw ``i`` of the stream depends only on
the key and ``i``, so any element can be regenerated without replaying state.
"""
import hashlib

import numpy as np

from . import _kernels

MASK64 = _kernels.MASK64


def mix64(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * _kernels.MIX_MUL_1) & MASK64
    z = ((z ^ (z >> 27)) * _kernels.MIX_MUL_2) & MASK64
    return z ^ (z >> 31)


def path_key(path):
    """Fold a seed path into a 64-bit stream key."""
    key = 0
    for part in path:
        key = mix64((key ^ (int(part) & MASK64)) + _kernels.GOLDEN_GAMMA)
    return key


def normal(path, shape):
    """Standard normal tensor of ``shape`` drawn from the stream at ``path``."""
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape, dtype=np.int64))
    return _kernels.gaussian_fill(path_key(path), n).reshape(shape)


def stable_hash(*parts):
    """63-bit seed from the SHA-256 of ``'|'.join(str(p) for p in parts)``."""
    text = "|".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def generator(*parts):
    """numpy Generator (PCG64) seeded from ``stable_hash(*parts)``."""
    return np.random.default_rng(stable_hash(*parts))
