"""Empirical check that quantization error carries no more entropy than the weight.

Entropy is the Shannon entropy (bits) of the empirical distribution of exact
float values. Rounding collapses many weights onto the same error value, so
the map W -> Delta can only merge outcomes, never split them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import QuantSpec, quant_error
from .tensor import make_rng

THEOREM_SLACK = 1e-9


@dataclass(frozen=True)
class EmpiricalDistribution:
    support: np.ndarray
    probs: np.ndarray

    @classmethod
    def of(cls, x) -> "EmpiricalDistribution":
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            raise ValueError("empirical distribution of an empty tensor")
        # +0.0 folds onto -0.0 here: they compare equal, so they count as one outcome
        support, counts = np.unique(x, return_counts=True)
        return cls(support, counts / x.size)


def empirical_entropy(x) -> float:
    p = EmpiricalDistribution.of(x).probs
    # "+ 0.0" turns the -0.0 of a point mass into 0.0
    return float(-np.sum(p * np.log2(p))) + 0.0


@dataclass(frozen=True)
class EntropyCheck:
    h_w: float
    h_delta: float
    holds: bool


def verify_entropy_theorem(w, spec: QuantSpec) -> EntropyCheck:
    w = np.asarray(w, dtype=np.float64)
    h_w = empirical_entropy(w)
    h_delta = empirical_entropy(quant_error(w, spec))
    return EntropyCheck(h_w, h_delta, h_delta <= h_w + THEOREM_SLACK)


def entropy_sweep(seeds: int, bits_list, rows: int = 64, cols: int = 64,
                  granularity: str = "per_tensor", constant: bool = False):
    """Yield ``(seed, bits, EntropyCheck)`` over seeded Gaussian matrices."""
    for seed in range(seeds):
        if constant:
            w = np.full((rows, cols), float(seed) * 0.125)
        else:
            w = make_rng(seed).standard_normal((rows, cols))
        for bits in bits_list:
            yield seed, bits, verify_entropy_theorem(w, QuantSpec(bits, granularity))
