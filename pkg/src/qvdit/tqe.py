"""Token-aware quantization estimator (rank-1 error compensation).

For a linear layer ``Y = X W^T`` the quantized forward becomes

    Y ~= Q(X) Q(W)^T + delta beta^T
    delta[rows of frame i] = (m_i * Q(X)[rows of frame i]) @ alpha

so the layer gains ``d_in + d_out + t`` parameters instead of ``d_out * d_in``.
Frame ``i`` (0-based) covers token rows ``[i * s, (i + 1) * s)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import QuantParams, QuantSpec, fake_quant, fake_quant_with
from .tensor import NORM_EPS, ShapeError, kaiming_init, matmul, softmax_row


@dataclass(frozen=True)
class FrameLayout:
    spatial: int
    frames: int

    def __post_init__(self):
        if self.spatial < 1 or self.frames < 1:
            raise ValueError(f"layout needs spatial, frames >= 1, got {self}")

    @property
    def n(self) -> int:
        return self.spatial * self.frames

    def frame_rows(self, i: int) -> slice:
        return slice(i * self.spatial, (i + 1) * self.spatial)

    def blocks(self, x: np.ndarray) -> np.ndarray:
        """View ``x`` (n x d) as (t, s*d): one flattened row per frame."""
        if x.shape[0] != self.n:
            raise ShapeError(f"expected {self.n} token rows, got {x.shape[0]}")
        return x.reshape(self.frames, -1)

    def expand(self, per_frame: np.ndarray) -> np.ndarray:
        """Repeat a length-t vector to one value per token."""
        return np.repeat(per_frame, self.spatial)


@dataclass
class TqeParams:
    alpha: np.ndarray
    beta: np.ndarray
    m: np.ndarray
    freeze_m: bool = field(default=False, compare=False)

    def copy(self) -> "TqeParams":
        return TqeParams(self.alpha.copy(), self.beta.copy(), self.m.copy(), self.freeze_m)

    @property
    def count(self) -> int:
        return self.alpha.size + self.beta.size + self.m.size


def tqe_param_count(d_in: int, d_out: int, t: int) -> int:
    if min(d_in, d_out, t) < 1:
        raise ValueError("dimensions must be positive")
    return d_in + d_out + t


def _frame_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na <= NORM_EPS or nb <= NORM_EPS:
        # empty/padded frame: treat as no dissimilarity
        return 1.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def init_m(x: np.ndarray, x_q: np.ndarray, layout: FrameLayout) -> np.ndarray:
    """Per-frame scales: quantization dissimilarity weight over frame salience.

    eta = softmax_i(1 - cos(frame_i(x), frame_i(x_q))),
    omega_i = |frame_i(x)|_1 / |x|_1, and m_i = eta_i / omega_i.
    """
    if x.shape != x_q.shape:
        raise ShapeError(f"activation pair shape mismatch: {x.shape} vs {x_q.shape}")
    fx = layout.blocks(x)
    fq = layout.blocks(x_q)
    dissim = np.array([1.0 - _frame_similarity(fx[i], fq[i]) for i in range(layout.frames)])
    eta = softmax_row(dissim)
    mass = np.abs(fx).sum(axis=1)
    total = mass.sum()
    if total <= NORM_EPS:
        return np.ones(layout.frames)
    omega = mass / total
    # a zero-mass frame contributes nothing to delta; give it a neutral scale
    return np.where(omega > 0, eta / np.where(omega > 0, omega, 1.0), 1.0)


def init_tqe(rng: np.random.Generator, d_in: int, d_out: int, layout: FrameLayout,
             x_calib: np.ndarray | None = None, x_calib_q: np.ndarray | None = None,
             use_m: bool = True) -> TqeParams:
    """alpha ~ Kaiming(fan_in=d_in), beta = 0, m from the calibration pair.

    With ``use_m=False`` (or no calibration pair) m is all ones and frozen.
    """
    alpha = kaiming_init(rng, 1, d_in)[0]
    beta = np.zeros(d_out)
    if not use_m or x_calib is None:
        return TqeParams(alpha, beta, np.ones(layout.frames), freeze_m=True)
    if x_calib.shape != (layout.n, d_in) or x_calib_q.shape != (layout.n, d_in):
        raise ShapeError(
            f"calibration pair must be {(layout.n, d_in)}, got {x_calib.shape} / {x_calib_q.shape}"
        )
    return TqeParams(alpha, beta, init_m(x_calib, x_calib_q, layout))


def low_rank_error(x_q: np.ndarray, params: TqeParams, layout: FrameLayout) -> np.ndarray:
    """Per-token error estimate, shape (n, 1)."""
    if x_q.shape[0] != layout.n or x_q.shape[1] != params.alpha.size:
        raise ShapeError(f"x_q {x_q.shape} does not match layout n={layout.n}, d_in={params.alpha.size}")
    if params.m.size != layout.frames:
        raise ShapeError(f"m has {params.m.size} entries for {layout.frames} frames")
    return (layout.expand(params.m) * (x_q @ params.alpha))[:, None]


def quantized_weight(w: np.ndarray, wspec: QuantSpec, wparams: QuantParams | None = None) -> np.ndarray:
    if wspec.passthrough:
        return w
    if wparams is not None:
        return fake_quant_with(w, wparams)
    return fake_quant(w, wspec)


def tqe_forward(x: np.ndarray, w: np.ndarray, wspec: QuantSpec, aspec: QuantSpec,
                params: TqeParams | None, layout: FrameLayout,
                wparams: QuantParams | None = None) -> np.ndarray:
    """Quantized matmul plus the rank-1 compensation term.

    ``wparams`` pins the weight quantization parameters (e.g. calibrated
    scales); otherwise they are derived from ``w`` per ``wspec``.
    """
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"tqe_forward shape mismatch: x {x.shape} vs w {w.shape}")
    xq = fake_quant(x, aspec)
    y = matmul(xq, quantized_weight(w, wspec, wparams).T)
    if params is None:
        return y
    if params.beta.size != w.shape[0]:
        raise ShapeError(f"beta has {params.beta.size} entries for d_out={w.shape[0]}")
    return y + low_rank_error(xq, params, layout) * params.beta[None, :]
