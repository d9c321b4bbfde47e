"""Deterministic seed derivation for replayable random draws.

Every stochastic draw in training and sampling is keyed on a tuple such as
(seed, purpose, step, sample_id) instead of consuming a shared stateful
stream.  Draws are therefore order-independent, safe to parallelize, and a
run can be resumed from any step without saved generator state.
"""

from __future__ import annotations

import hashlib

import torch

_MASK_63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Hash a key tuple into a 63-bit integer, stable across platforms."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & _MASK_63


def generator(*parts) -> torch.Generator:
    """CPU torch generator seeded from a key tuple."""
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g
