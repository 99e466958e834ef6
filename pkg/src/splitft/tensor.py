"""Dense linear-algebra kernel.

Matrices are plain 2-D numpy arrays (float32 on the training path, float64
for gradient checks).  Products go through a jitted triple loop so the
accumulation order is fixed: for every output entry the inner index runs in
ascending order with a separate multiply and add, which makes results
bit-reproducible and identical to a naive scalar loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@numba.njit(cache=True)
def _matmul_kernel(a, b, out):
    m, kk = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]


@numba.njit(cache=True)
def _bmatmul_kernel(a, b, out):
    nb, m, kk = a.shape
    n = b.shape[2]
    for p in range(nb):
        for i in range(m):
            for j in range(n):
                out[p, i, j] = 0.0
            for k in range(kk):
                aik = a[p, i, k]
                for j in range(n):
                    out[p, i, j] += aik * b[p, k, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fixed-order product of an ``m x k`` and a ``k x n`` matrix."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    out = np.empty((a.shape[0], b.shape[1]), dtype=dtype)
    _matmul_kernel(a, b, out)
    return out


def bmatmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched :func:`matmul` over the leading axis of two 3-D arrays."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmatmul: cannot multiply {a.shape} by {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=dtype)
    _bmatmul_kernel(a, b, out)
    return out


def transpose(a: np.ndarray) -> np.ndarray:
    """Return a contiguous copy of ``a.T``."""
    return np.ascontiguousarray(a.T)


class Rng:
    """Seeded generator; the same seed gives the same stream on every platform."""

    def __init__(self, seed: int | tuple[int, ...]):
        self.seed = seed
        entropy = list(seed) if isinstance(seed, tuple) else int(seed)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from ``(seed, key)``."""
        base = self.seed if isinstance(self.seed, tuple) else (int(self.seed),)
        return Rng(base + (int(key),))


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


def seeded_fill(rows: int, cols: int, dist: Uniform | Normal, rng: Rng) -> np.ndarray:
    """Draw a ``rows x cols`` float32 matrix from ``dist``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"seeded_fill: shape must be positive, got {rows}x{cols}")
    if isinstance(dist, Uniform):
        if not (np.isfinite(dist.lo) and np.isfinite(dist.hi)) or dist.hi < dist.lo:
            raise ValueError(f"invalid uniform bounds [{dist.lo}, {dist.hi}]")
        out = rng.gen.uniform(dist.lo, dist.hi, size=(rows, cols))
    elif isinstance(dist, Normal):
        if not (np.isfinite(dist.mean) and np.isfinite(dist.std)) or dist.std < 0:
            raise ValueError(f"invalid normal parameters mean={dist.mean} std={dist.std}")
        out = rng.gen.normal(dist.mean, dist.std, size=(rows, cols))
    else:
        raise TypeError(f"unknown distribution {dist!r}")
    return out.astype(DTYPE)
