"""Central finite-difference checks of the analytic gradients.

Relative error is ``max |analytic - fd| / max |fd|``: normalising by the
gradient's infinity norm keeps near-zero coordinates, where the difference
quotient is pure roundoff, from dominating the figure.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .model import ToyDiTConfig, build_model, init_quant_state
from .tensor import make_rng
from .tmd import (
    grad_loss_wrt_relation,
    grad_loss_wrt_relation_expanded,
    relation_matrix,
    task_loss,
    temporal_distribution,
    tmd_grad,
    tmd_loss,
    total_loss_and_grad,
)
from .tqe import FrameLayout, init_tqe

FD_STEP = 1e-6
GRAD_TOL = 1e-5
IDENTITY_TOL = 1e-14


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tol)


def central_fd(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Gradient of ``f`` w.r.t. every entry of ``x`` (perturbed in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = float(np.max(np.abs(fd)))
    diff = float(np.max(np.abs(analytic - fd)))
    return diff if scale == 0.0 else diff / scale


def _instance(frames: int, spatial: int, dim: int, seed: int):
    rng = make_rng(seed)
    layout = FrameLayout(spatial, frames)
    s_fp = rng.standard_normal((layout.n, dim))
    s_q = s_fp + 0.3 * rng.standard_normal((layout.n, dim))
    return layout, s_fp, s_q


def _corrupted(d_fp, d_q):
    # drops the sign of the softmax-KL derivative: a plausible, wrong gradient
    return d_fp - d_q


def check_tmd(frames: int = 4, spatial: int = 3, dim: int = 5, seed: int = 0, corrupt: bool = False) -> CheckResult:
    layout, s_fp, s_q = _instance(frames, spatial, dim, seed)
    fn = _corrupted if corrupt else grad_loss_wrt_relation
    analytic = tmd_grad(s_fp, s_q, layout, grad_t_fn=fn)
    fd = central_fd(lambda: tmd_loss(s_fp, s_q, layout), s_q)
    return CheckResult("tmd_grad", relative_error(analytic, fd), GRAD_TOL)


def check_total(gamma: float, frames: int = 4, spatial: int = 3, dim: int = 5, seed: int = 0,
                corrupt: bool = False) -> CheckResult:
    layout, s_fp, s_q = _instance(frames, spatial, dim, seed)
    _, analytic = total_loss_and_grad(s_fp, s_q, layout, gamma)
    if corrupt and gamma:
        analytic = analytic - gamma * tmd_grad(s_fp, s_q, layout) + gamma * tmd_grad(
            s_fp, s_q, layout, grad_t_fn=_corrupted)

    def total():
        return task_loss(s_fp, s_q) + gamma * tmd_loss(s_fp, s_q, layout)

    fd = central_fd(total, s_q)
    return CheckResult(f"total_grad[gamma={gamma:g}]", relative_error(analytic, fd), GRAD_TOL)


def check_relation_identity(frames: int = 4, spatial: int = 3, dim: int = 5, seed: int = 0) -> CheckResult:
    """Unsimplified vs simplified dL/dT, max absolute difference."""
    layout, s_fp, s_q = _instance(frames, spatial, dim, seed)
    d_fp = temporal_distribution(relation_matrix(s_fp, layout))
    d_q = temporal_distribution(relation_matrix(s_q, layout))
    err = float(np.max(np.abs(grad_loss_wrt_relation(d_fp, d_q) - grad_loss_wrt_relation_expanded(d_fp, d_q))))
    return CheckResult("relation_grad_identity", err, IDENTITY_TOL)


def check_model(frames: int = 3, spatial: int = 2, dim: int = 6, seed: int = 0, gamma: float = 100.0) -> CheckResult:
    """Hand-written model backward (alpha, beta, m, input) against FD, quantizers passed through."""
    cfg = ToyDiTConfig(layers=2, d=dim, spatial=spatial, frames=frames, block="attention", seed=seed)
    model = build_model(cfg)
    rng = make_rng(seed, stream=7)
    qstate = init_quant_state(model, None, None)
    for name, st in qstate.items():
        lin = model.linears[name]
        tqe = init_tqe(rng, lin.d_in, lin.d_out, cfg.layout)
        st.tqe = replace(tqe, beta=0.3 * rng.standard_normal(lin.d_out), m=rng.uniform(0.5, 1.5, frames))
    z = rng.standard_normal((cfg.layout.n, dim))
    target = model.forward(z).out + 0.5 * rng.standard_normal((cfg.layout.n, dim))

    def loss():
        out = model.forward(z, qstate, keep_trace=False).out
        return task_loss(target, out) + gamma * tmd_loss(target, out, cfg.layout)

    r = model.forward(z, qstate, keep_tape=True, keep_trace=False)
    _, g_out = total_loss_and_grad(target, r.out, cfg.layout, gamma)
    grads, gz = model.backward(r, g_out)
    worst = relative_error(gz, central_fd(loss, z))
    for name, st in qstate.items():
        for key in ("alpha", "beta", "m"):
            arr = getattr(st.tqe, key)
            worst = max(worst, relative_error(grads[name][key], central_fd(loss, arr)))
    return CheckResult("model_backward", worst, GRAD_TOL)


def run_all(frames: int = 4, spatial: int = 3, dim: int = 5, seed: int = 0, corrupt: bool = False,
            with_model: bool = True) -> list[CheckResult]:
    out = [check_tmd(frames, spatial, dim, seed, corrupt)]
    out += [check_total(g, frames, spatial, dim, seed, corrupt) for g in (0.0, 1.0, 100.0)]
    out.append(check_relation_identity(frames, spatial, dim, seed))
    if with_model:
        out.append(check_model(seed=seed))
    return out
