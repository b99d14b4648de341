"""Deterministic seed derivation.

Every stochastic choice in a stage is drawn from a generator derived from
(stage tag, run seed, step index), so training is resumable at any step
without serializing RNG state: step s of a resumed run sees exactly the
randomness step s of an uninterrupted run would see.
"""

import hashlib

import torch

_MASK = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a stable 63-bit seed."""
    h = hashlib.blake2s(repr(tuple(parts)).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK


def generator_for(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen
