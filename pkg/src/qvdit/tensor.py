"""Dense float64 helpers shared by every other module.

Arrays are plain ``numpy.ndarray`` objects in float64. Randomness always
comes from a Philox counter-based generator so that a seed fully determines
the draw sequence.
"""
from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12
PRNG_NAME = "philox4x64"


class ShapeError(ValueError):
    pass


class DegenerateNormError(ValueError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return the project's single documented PRNG seeded with ``seed``.

    ``stream`` selects an independent sub-stream for the same seed.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if stream == 0:
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(int(stream),))))


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_row(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine length mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt(np.dot(u, u))
    nv = np.sqrt(np.dot(v, v))
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise DegenerateNormError(f"cosine of near-zero vector (norms {nu:.3g}, {nv:.3g})")
    # product of norms is commutative, so cosine(u, v) == cosine(v, u) bit-exactly
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def kaiming_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """He-normal init: N(0, 2 / fan_in) with fan_in = ``cols``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"kaiming_init needs positive dims, got ({rows}, {cols})")
    return rng.standard_normal((rows, cols)) * np.sqrt(2.0 / cols)
