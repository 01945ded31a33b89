"""Numeric substrate: float64 tensors and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 1 or 2.
The random generator is NumPy's PCG64 bit generator; normal draws use NumPy's
ziggurat sampler (``Generator.standard_normal``). Streams are reproducible
within one installed NumPy version, not across languages.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError

Tensor = np.ndarray
Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    """Build a float64 tensor, optionally reshaping row-major data."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim not in (1, 2):
        raise DimensionError(f"tensors are rank 1 or 2, got shape {arr.shape}")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _shape(shape) -> tuple[int, ...]:
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    if not shape or any(int(s) < 1 for s in shape):
        raise ParameterError(f"shape must have positive dimensions, got {shape}")
    return tuple(int(s) for s in shape)


def rand_uniform(rng: Rng, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
    if not low < high:
        raise ParameterError(f"rand_uniform needs low < high, got [{low}, {high})")
    out = rng.uniform(low, high, size=_shape(shape))
    # uniform() can round up to `high` when the interval is a few ulps wide
    return np.where(out >= high, low, out)


def gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    if std < 0:
        raise ParameterError(f"gaussian needs std >= 0, got {std}")
    z = rng.standard_normal(size=_shape(shape))
    if std == 0:
        return np.full(z.shape, float(mean))
    return mean + std * z
