"""Task loss, temporal maintenance distillation loss, and their gradients.

Frames of an output ``S`` (n x d) are flattened to vectors ``v_i``. The
relation matrix is ``T[i, j] = cos(v_i, v_j)``, each row is softmaxed into a
distribution ``D_i``, and the temporal loss is ``sum_i KL(D_i^fp || D_i^q)``
with natural log. Gradients are closed-form; only ``s_q`` receives them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NORM_EPS, DegenerateNormError, ShapeError, softmax_row
from .tqe import FrameLayout

DEFAULT_GAMMA = 100.0


@dataclass(frozen=True)
class LossReport:
    task: float
    temporal: float
    total: float
    gamma: float


def _check_pair(s_fp: np.ndarray, s_q: np.ndarray) -> None:
    if s_fp.shape != s_q.shape:
        raise ShapeError(f"output shape mismatch: {s_fp.shape} vs {s_q.shape}")


def task_loss(s_fp: np.ndarray, s_q: np.ndarray) -> float:
    _check_pair(s_fp, s_q)
    diff = s_fp - s_q
    return float(np.sum(diff * diff))


def task_grad(s_fp: np.ndarray, s_q: np.ndarray) -> np.ndarray:
    return -2.0 * (s_fp - s_q)


def _frame_vectors(s: np.ndarray, layout: FrameLayout) -> tuple[np.ndarray, np.ndarray]:
    v = layout.blocks(s)
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmin(norms))
        raise DegenerateNormError(f"frame {bad} has near-zero norm {norms[bad]:.3g}")
    return v, norms


def relation_matrix(s: np.ndarray, layout: FrameLayout) -> np.ndarray:
    v, norms = _frame_vectors(s, layout)
    u = v / norms[:, None]
    t_mat = np.clip(u @ u.T, -1.0, 1.0)
    t_mat = 0.5 * (t_mat + t_mat.T)
    np.fill_diagonal(t_mat, 1.0)
    return t_mat


def temporal_distribution(t_mat: np.ndarray) -> np.ndarray:
    """Row-wise softmax; the self-similarity entry stays in every row."""
    return softmax_row(t_mat)


def kl_rows(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * (np.log(p) - np.log(q))))


def tmd_loss_from_relation(t_fp: np.ndarray, t_q: np.ndarray) -> float:
    return kl_rows(temporal_distribution(t_fp), temporal_distribution(t_q))


def tmd_loss(s_fp: np.ndarray, s_q: np.ndarray, layout: FrameLayout) -> float:
    _check_pair(s_fp, s_q)
    return tmd_loss_from_relation(relation_matrix(s_fp, layout), relation_matrix(s_q, layout))


def grad_loss_wrt_relation(d_fp: np.ndarray, d_q: np.ndarray) -> np.ndarray:
    """dL/dT^q[i, j] = D^q[i, j] - D^fp[i, j] (rows of D^fp sum to one)."""
    return d_q - d_fp


def grad_loss_wrt_relation_expanded(d_fp: np.ndarray, d_q: np.ndarray) -> np.ndarray:
    """Unsimplified chain-rule form: sum_k D^fp[i, k] * D^q[i, j] - D^fp[i, j]."""
    return d_fp.sum(axis=1, keepdims=True) * d_q - d_fp


def cosine_grad(vi: np.ndarray, vj: np.ndarray) -> np.ndarray:
    """d cos(vi, vj) / d vi = vj / (|vi||vj|) - (vi.vj) vi / (|vi|^3 |vj|)."""
    ni = np.sqrt(np.dot(vi, vi))
    nj = np.sqrt(np.dot(vj, vj))
    if ni <= NORM_EPS or nj <= NORM_EPS:
        raise DegenerateNormError("cosine gradient of a near-zero frame")
    return (ni * ni * vj - np.dot(vi, vj) * vi) / (ni**3 * nj)


def grad_relation_wrt_frame(s_q: np.ndarray, layout: FrameLayout, i: int, j: int) -> np.ndarray:
    v = layout.blocks(s_q)
    if i == j:
        # T[i, i] is identically 1
        return np.zeros(v.shape[1])
    return cosine_grad(v[i], v[j])


def tmd_grad(s_fp: np.ndarray, s_q: np.ndarray, layout: FrameLayout,
             grad_t_fn=grad_loss_wrt_relation) -> np.ndarray:
    """Gradient of :func:`tmd_loss` with respect to ``s_q``.

    Frame i collects both the T[i, j] and T[j, i] paths. ``grad_t_fn`` is a
    seam for negative-control tests.
    """
    _check_pair(s_fp, s_q)
    d_fp = temporal_distribution(relation_matrix(s_fp, layout))
    d_q = temporal_distribution(relation_matrix(s_q, layout))
    g = grad_t_fn(d_fp, d_q)
    g = g + g.T
    np.fill_diagonal(g, 0.0)
    v, norms = _frame_vectors(s_q, layout)
    u = v / norms[:, None]
    cos = u @ u.T
    # sum_j g[i, j] * (u_j - cos[i, j] u_i) / |v_i|, all frames at once
    grad = (g @ u - np.sum(g * cos, axis=1, keepdims=True) * u) / norms[:, None]
    return grad.reshape(s_q.shape)


def tmd_grad_loop(s_fp: np.ndarray, s_q: np.ndarray, layout: FrameLayout) -> np.ndarray:
    """Per-(i, j) assembly of the same gradient; slow path used as a cross-check."""
    d_fp = temporal_distribution(relation_matrix(s_fp, layout))
    d_q = temporal_distribution(relation_matrix(s_q, layout))
    g = grad_loss_wrt_relation(d_fp, d_q)
    out = np.zeros((layout.frames, s_q.size // layout.frames))
    for i in range(layout.frames):
        for j in range(layout.frames):
            dt = grad_relation_wrt_frame(s_q, layout, i, j)
            out[i] += g[i, j] * dt + g[j, i] * dt
    return out.reshape(s_q.shape)


def total_loss_and_grad(s_fp: np.ndarray, s_q: np.ndarray, layout: FrameLayout,
                        gamma: float = DEFAULT_GAMMA) -> tuple[LossReport, np.ndarray]:
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    task = task_loss(s_fp, s_q)
    temporal = tmd_loss(s_fp, s_q, layout)
    grad = task_grad(s_fp, s_q)
    if gamma == 0:
        # temporal is still reported; the gradient is the task gradient exactly
        return LossReport(task, temporal, task, 0.0), grad
    grad = grad + gamma * tmd_grad(s_fp, s_q, layout)
    return LossReport(task, temporal, task + gamma * temporal, gamma), grad
