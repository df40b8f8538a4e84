"""Parameter initialization helpers.

All randomness flows through numpy's PCG64 generators seeded from
explicit integer sequences, so any parameter buffer is reproducible
from its seed path alone.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def derive_rng(*seed_path: int) -> np.random.Generator:
    """Independent PCG64 stream for a structural position in the model."""
    return np.random.default_rng(list(seed_path))


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02,
                 dtype=np.float64, trainable: bool = True) -> Tensor:
    """Normal(0, std) redrawn until within +/-2 std, like common ViT init."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2.0 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2.0 * std
    return Tensor(vals.astype(dtype), requires_grad=trainable)


def zeros(shape, dtype=np.float64, trainable: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=trainable)


def ones(shape, dtype=np.float64, trainable: bool = True) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=trainable)
