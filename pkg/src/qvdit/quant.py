"""Uniform affine quantization: codes in [0, 2^N - 1], scale s, zero-point z.

    q = clip(round(x / s) + z, 0, 2^N - 1),  s = (u - l) / (2^N - 1),  z = -round(l / s)
    x_hat = (q - z) * s

Rounding is half-to-even. Granularities:

* ``per_tensor``  one parameter set for the whole array
* ``per_channel`` one set per row (weights, one per output channel)
* ``per_token``   one set per row, recomputed from the data on every call
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._backend import kernels
from ._kernels_py import DEGENERATE_EPS

GRANULARITIES = ("per_tensor", "per_channel", "per_token")

RangePolicy = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def minmax_range(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise (min, max) of a 2-D array."""
    return x.min(axis=1), x.max(axis=1)


@dataclass
class QuantParams:
    """Scale, zero-point and bounds for one slice or one row per entry.

    Fields are scalars (0-d arrays) for a single slice, or 1-D arrays with
    one entry per row.
    """

    s: np.ndarray
    z: np.ndarray
    l: np.ndarray
    u: np.ndarray
    bits: int

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.l = np.asarray(self.l, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bit-width must be in [2, 16], got {self.bits}")
        if np.any(self.s <= 0):
            raise ValueError("scale must be positive")
        if np.any(self.u < self.l):
            raise ValueError("upper bound below lower bound")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def __len__(self) -> int:
        return 1 if self.s.ndim == 0 else self.s.shape[0]

    def rows(self) -> tuple[np.ndarray, np.ndarray]:
        """(s, z) as 1-D arrays, ready for the row kernels."""
        return np.atleast_1d(self.s).copy(), np.atleast_1d(self.z).copy()

    def copy(self) -> "QuantParams":
        return QuantParams(self.s.copy(), self.z.copy(), self.l.copy(), self.u.copy(), self.bits)


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width and granularity. ``bits=None`` is a pass-through (no quantization)."""

    bits: int | None
    granularity: str = "per_tensor"
    range_policy: RangePolicy | None = None

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.bits is not None and not 2 <= self.bits <= 16:
            raise ValueError(f"bit-width must be in [2, 16], got {self.bits}")

    @property
    def passthrough(self) -> bool:
        return self.bits is None


def params_from_range(l, u, bits: int) -> QuantParams:
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    s, z = kernels.params_from_range(np.atleast_1d(l), np.atleast_1d(u), bits)
    if l.ndim == 0:
        s, z = s[0], z[0]
    return QuantParams(s, z, l, u, bits)


def compute_params(x, bits: int, range_policy: RangePolicy | None = None) -> QuantParams:
    """Parameters for a whole slice (all elements share one scale)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.size == 0:
        raise ValueError("cannot compute quantization params of an empty slice")
    l, u = (range_policy or minmax_range)(x)
    return params_from_range(l[0], u[0], bits)


def row_params(x, bits: int, range_policy: RangePolicy | None = None) -> QuantParams:
    """One parameter set per row of a 2-D array."""
    x = np.asarray(x, dtype=np.float64)
    l, u = (range_policy or minmax_range)(x)
    return params_from_range(l, u, bits)


def _as_rows(x: np.ndarray, p: QuantParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s, z = p.rows()
    if p.s.ndim == 0:
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(1, -1)
    else:
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(len(s), -1)
    return flat, s, z


def quantize(x, p: QuantParams) -> np.ndarray:
    """Integer codes in [0, 2^N - 1], same shape as ``x``."""
    x = np.asarray(x, dtype=np.float64)
    flat, s, z = _as_rows(x, p)
    return kernels.quantize_rows(flat, s, z, p.bits).reshape(x.shape)


def dequantize(q, p: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    if q.size and (q.min() < 0 or q.max() > p.qmax):
        raise ValueError(f"integer codes outside [0, {p.qmax}]")
    qf = q.astype(np.float64)
    if p.s.ndim == 0:
        return (qf - p.z) * p.s
    shape = (-1,) + (1,) * (q.ndim - 1)
    return (qf - p.z.reshape(shape)) * p.s.reshape(shape)


def fake_quant_with(x, p: QuantParams) -> np.ndarray:
    """Quantize then dequantize under fixed parameters."""
    x = np.asarray(x, dtype=np.float64)
    flat, s, z = _as_rows(x, p)
    return kernels.fake_quant_rows(flat, s, z, p.bits).reshape(x.shape)


def params_for(x, spec: QuantSpec) -> QuantParams:
    x = np.asarray(x, dtype=np.float64)
    if spec.passthrough:
        raise ValueError("pass-through spec has no quantization params")
    if spec.granularity == "per_tensor":
        return compute_params(x, spec.bits, spec.range_policy)
    return row_params(x.reshape(x.shape[0], -1), spec.bits, spec.range_policy)


def fake_quant(x, spec: QuantSpec) -> np.ndarray:
    """Simulated quantization with parameters derived from ``x`` per ``spec``."""
    x = np.asarray(x, dtype=np.float64)
    if spec.passthrough:
        return x.copy()
    if spec.granularity != "per_tensor" and spec.range_policy is None and x.ndim == 2:
        return kernels.fake_quant_dynamic(x, spec.bits)
    return fake_quant_with(x, params_for(x, spec))


def quant_error(w, spec: QuantSpec) -> np.ndarray:
    """Perturbation Delta with fake_quant(w) = w + Delta."""
    w = np.asarray(w, dtype=np.float64)
    return fake_quant(w, spec) - w
