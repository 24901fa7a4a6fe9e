"""Post-training calibration of weight scales and TQE parameters.

The full-precision teacher is frozen. Trainable: per-channel weight scales
(lr ``lr_quant``) and per-layer alpha, beta, m (lr ``lr_tqe``). Activation
ranges stay dynamic per token and are never trained. Gradients reach the
scales through a straight-through estimator; updates use Adam.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import LayerQuantState, QuantState, ToyDiT, init_quant_state
from .quant import fake_quant
from .tensor import make_rng
from .tmd import DEFAULT_GAMMA, relation_matrix, task_loss, tmd_loss, total_loss_and_grad
from .tqe import init_m, init_tqe

log = logging.getLogger(__name__)

DEFAULT_ITERS = {3: 1500, 4: 1000}
HIGH_BIT_ITERS = 500
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MIN_SCALE = 1e-12
LOSS_POINTS = ("output", "blocks")


def default_iters(w_bits: int | None) -> int:
    """Desk-scale iteration budget: 1500 at <=3 bits, 1000 at 4, 500 above."""
    if w_bits is None or w_bits >= 5:
        return HIGH_BIT_ITERS
    return DEFAULT_ITERS[3] if w_bits <= 3 else DEFAULT_ITERS[4]


class CalibrationDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"total loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class CalibConfig:
    w_bits: int | None = 3
    a_bits: int | None = 6
    gamma: float = DEFAULT_GAMMA
    iters: int | None = None
    batch: int = 4
    lr_quant: float = 1e-6
    lr_tqe: float = 1e-5
    seed: int = 0
    freeze_m: bool = False
    enable_tqe: bool = True
    enable_tmd: bool = True
    use_m: bool = True
    loss_point: str = "output"
    layer_bits: dict = field(default_factory=dict, hash=False)
    tqe_skip: tuple = ()

    def __post_init__(self):
        if self.lr_quant <= 0 or self.lr_tqe <= 0:
            raise ValueError("learning rates must be positive")
        if self.iters is not None and self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.loss_point not in LOSS_POINTS:
            raise ValueError(f"loss_point must be one of {LOSS_POINTS}")

    @property
    def n_iters(self) -> int:
        return default_iters(self.w_bits) if self.iters is None else self.iters

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.enable_tmd else 0.0


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    task: float
    temporal: float
    total: float


@dataclass
class CalibResult:
    qstate: QuantState
    history: list[HistoryRow]
    cfg: CalibConfig


@dataclass(frozen=True)
class MetricsReport:
    task_loss: float
    temporal_kl: float
    relation_gap: float
    relative_error: float

    def as_dict(self) -> dict:
        return {
            "task_loss": self.task_loss,
            "temporal_kl": self.temporal_kl,
            "relation_gap": self.relation_gap,
            "relative_error": self.relative_error,
        }


class Adam:
    """Adam without weight decay over a list of arrays updated in place."""

    def __init__(self, params: list[tuple[np.ndarray, float]]):
        self.params = params
        self.m = [np.zeros_like(p) for p, _ in params]
        self.v = [np.zeros_like(p) for p, _ in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = ADAM_BETAS
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, ((p, lr), g) in enumerate(zip(self.params, grads)):
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + ADAM_EPS)


def _attach_tqe(model: ToyDiT, qstate: QuantState, first_batch: np.ndarray, cfg: CalibConfig) -> None:
    """TQE on every quantized layer; m seeded from the first batch's activations."""
    rng = make_rng(cfg.seed, stream=1)
    layout = model.layout
    traces = [model.forward(z, qstate).trace for z in first_batch]
    for name, lin in model.linears.items():
        if name in cfg.tqe_skip:
            continue
        st = qstate[name]
        params = init_tqe(rng, lin.d_in, lin.d_out, layout)
        if cfg.use_m:
            ms = [init_m(tr[name].x, fake_quant(tr[name].x, st.aspec), layout) for tr in traces]
            params.m = np.mean(ms, axis=0)
            params.freeze_m = cfg.freeze_m
        st.tqe = params


def _trainable(qstate: QuantState, cfg: CalibConfig):
    """Ordered (layer, key, array, lr) for every trainable parameter."""
    out = []
    for name, st in qstate.items():
        if st.wparams is not None:
            out.append((name, "s", st.wparams.s, cfg.lr_quant))
        if st.tqe is not None:
            out.append((name, "alpha", st.tqe.alpha, cfg.lr_tqe))
            out.append((name, "beta", st.tqe.beta, cfg.lr_tqe))
            if not st.tqe.freeze_m:
                out.append((name, "m", st.tqe.m, cfg.lr_tqe))
    return out


def initial_state(model: ToyDiT, cfg: CalibConfig) -> QuantState:
    return init_quant_state(model, cfg.w_bits, cfg.a_bits, cfg.layer_bits)


def teacher_targets(model: ToyDiT, latents: np.ndarray, loss_point: str = "output") -> np.ndarray:
    """Teacher outputs, shape (N, n, d), or (N, L, n, d) for per-block losses."""
    r = model.forward(latents, keep_trace=False)
    if loss_point == "output":
        return r.out
    return np.stack(r.block_outputs, axis=1)


def loss_and_grads(model: ToyDiT, qstate: QuantState, zb: np.ndarray, targets: np.ndarray,
                   cfg: CalibConfig):
    """Batch of latents (B, n, d): per-item (task, temporal, total) rows and summed grads."""
    gamma = cfg.effective_gamma
    layout = model.layout
    r = model.forward(zb, qstate, keep_tape=True, keep_trace=False)
    losses = np.zeros((zb.shape[0], 3))
    if cfg.loss_point == "output":
        g = np.empty_like(r.out)
        for k in range(zb.shape[0]):
            rep, g[k] = total_loss_and_grad(targets[k], r.out[k], layout, gamma)
            losses[k] = rep.task, rep.temporal, rep.total
        grads, _ = model.backward(r, g)
    else:
        gb = [np.empty_like(r.out) for _ in r.block_outputs]
        for b, s_b in enumerate(r.block_outputs):
            for k in range(zb.shape[0]):
                rep, gb[b][k] = total_loss_and_grad(targets[k, b], s_b[k], layout, gamma)
                losses[k] += rep.task, rep.temporal, rep.total
        grads, _ = model.backward(r, np.zeros_like(r.out), gb)
    return losses, grads


def calibrate(model: ToyDiT, calib_set: list[np.ndarray], cfg: CalibConfig,
              progress_every: int = 0) -> CalibResult:
    if len(calib_set) == 0:
        raise ValueError("calibration set is empty")
    latents = np.stack(calib_set)
    qstate = initial_state(model, cfg)
    order_rng = make_rng(cfg.seed, stream=2)
    n = len(latents)
    perm = order_rng.permutation(n)
    cursor = 0

    def next_batch():
        nonlocal perm, cursor
        idx = []
        for _ in range(cfg.batch):
            if cursor == n:
                perm = order_rng.permutation(n)
                cursor = 0
            idx.append(perm[cursor])
            cursor += 1
        return np.array(idx)

    iters = cfg.n_iters
    history: list[HistoryRow] = []
    idx = next_batch()
    if cfg.enable_tqe:
        _attach_tqe(model, qstate, latents[idx], cfg)
    if iters == 0:
        return CalibResult(qstate, history, cfg)

    targets = teacher_targets(model, latents, cfg.loss_point)
    trainable = _trainable(qstate, cfg)
    opt = Adam([(arr, lr) for _, _, arr, lr in trainable])

    for it in range(iters):
        if it:
            idx = next_batch()
        # overflow surfaces as a non-finite total, reported below
        with np.errstate(over="ignore", invalid="ignore"):
            losses, grads = loss_and_grads(model, qstate, latents[idx], targets[idx], cfg)
            task, temporal, total = losses.mean(axis=0)
        if not np.isfinite(total):
            raise CalibrationDiverged(it, total)
        history.append(HistoryRow(it, float(task), float(temporal), float(total)))
        opt.step([grads[name][key] / len(idx) for name, key, _, _ in trainable])
        for st in qstate.values():
            if st.wparams is not None:
                np.maximum(st.wparams.s, MIN_SCALE, out=st.wparams.s)
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d task %.6g temporal %.6g total %.6g", it + 1, task, temporal, total)
    return CalibResult(qstate, history, cfg)


def evaluate(model: ToyDiT, result: CalibResult | QuantState, eval_set: list[np.ndarray]) -> MetricsReport:
    qstate = result.qstate if isinstance(result, CalibResult) else result
    missing = set(model.layer_names) - set(qstate)
    if missing:
        raise KeyError(f"result lacks layers: {sorted(missing)}")
    layout = model.layout
    task = temporal = gap = rel = 0.0
    for z in eval_set:
        s_fp = model.forward(z).out
        s_q = model.forward(z, qstate).out
        task += task_loss(s_fp, s_q)
        temporal += tmd_loss(s_fp, s_q, layout)
        gap += float(np.linalg.norm(relation_matrix(s_fp, layout) - relation_matrix(s_q, layout)))
        rel += float(np.linalg.norm(s_fp - s_q) / np.linalg.norm(s_fp))
    k = len(eval_set)
    return MetricsReport(task / k, temporal / k, gap / k, rel / k)


ABLATION_ROWS = (
    ("PTQ baseline", dict(enable_tqe=False, enable_tmd=False)),
    ("+TQE (w/o M)", dict(enable_tqe=True, use_m=False, enable_tmd=False)),
    ("+TQE (w M)", dict(enable_tqe=True, use_m=True, enable_tmd=False)),
    ("+TMD", dict(enable_tqe=False, enable_tmd=True)),
    ("TQE + TMD", dict(enable_tqe=True, use_m=True, enable_tmd=True)),
)


@dataclass(frozen=True)
class AblationRow:
    label: str
    metrics: MetricsReport
    final_total: float


def run_ablation(model: ToyDiT, calib_set, base_cfg: CalibConfig, eval_set=None) -> list[AblationRow]:
    """The five-row ladder; metrics on ``eval_set``, or on the calibration set when omitted."""
    rows = []
    for label, toggles in ABLATION_ROWS:
        res = calibrate(model, calib_set, replace(base_cfg, **toggles))
        final = res.history[-1].total if res.history else float("nan")
        rows.append(AblationRow(label, evaluate(model, res, calib_set if eval_set is None else eval_set), final))
    return rows


def copy_state(qstate: QuantState) -> QuantState:
    return {k: v.copy() for k, v in qstate.items()}


__all__ = [
    "ABLATION_ROWS", "Adam", "AblationRow", "CalibConfig", "CalibResult", "CalibrationDiverged",
    "HistoryRow", "LayerQuantState", "MetricsReport", "calibrate", "copy_state", "default_iters",
    "evaluate", "initial_state", "loss_and_grads", "run_ablation",
]
