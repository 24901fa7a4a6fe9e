"""Miniature video DiT used as teacher (full precision) and student (quantized).

Each block is an optional single-head self-attention sub-layer followed by an
MLP (d -> 4d -> d, tanh-GELU), both with residual adds. Only the linear
layers are quantized; attention scores, softmax, GELU and residuals stay in
full precision. Backward passes are written out by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .quant import QuantParams, QuantSpec, fake_quant, row_params
from .tensor import ShapeError, make_rng, softmax_row
from .tqe import FrameLayout, TqeParams, tqe_forward

BLOCK_KINDS = ("mlp", "attention")


@dataclass(frozen=True)
class ToyDiTConfig:
    layers: int = 4
    d: int = 64
    spatial: int = 16
    frames: int = 8
    block: str = "attention"
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        if min(self.layers, self.d, self.spatial, self.frames, self.mlp_ratio) < 1:
            raise ValueError(f"all model dimensions must be positive: {self}")
        if self.block not in BLOCK_KINDS:
            raise ValueError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")

    @property
    def layout(self) -> FrameLayout:
        return FrameLayout(self.spatial, self.frames)


@dataclass
class Linear:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class LayerQuantState:
    """Quantization state of one linear layer.

    ``wparams`` holds the (trainable) per-channel weight scales; activations
    are always quantized dynamically per token.
    """

    wspec: QuantSpec
    aspec: QuantSpec
    wparams: QuantParams | None = None
    tqe: TqeParams | None = None

    def copy(self) -> "LayerQuantState":
        return LayerQuantState(
            self.wspec,
            self.aspec,
            None if self.wparams is None else self.wparams.copy(),
            None if self.tqe is None else self.tqe.copy(),
        )


QuantState = dict  # layer name -> LayerQuantState


@dataclass
class TraceEntry:
    x: np.ndarray
    out: np.ndarray


@dataclass
class ForwardResult:
    out: np.ndarray
    trace: dict[str, TraceEntry]
    block_outputs: list[np.ndarray]
    tape: list = field(default_factory=list, repr=False)


class ToyDiT:
    """Stacked blocks over latents of shape (n, d), or a batch (B, n, d)."""

    def __init__(self, cfg: ToyDiTConfig, linears: dict[str, Linear]):
        self.cfg = cfg
        self.linears = linears

    @property
    def layout(self) -> FrameLayout:
        return self.cfg.layout

    @property
    def layer_names(self) -> list[str]:
        return list(self.linears)

    # -- forward -----------------------------------------------------------

    def _linear(self, name, x, qstate, tape, trace):
        lin = self.linears[name]
        st = None if qstate is None else qstate.get(name)
        if qstate is not None and st is None:
            raise KeyError(f"quantization state missing for layer {name!r}")
        batch, n, d_in = x.shape
        flat = x.reshape(batch * n, d_in)
        if st is None:
            y = flat @ lin.weight.T + lin.bias
            rec = None
        else:
            y, rec = self._quant_linear(flat, lin, st, batch, tape is not None)
        y = y.reshape(batch, n, -1)
        if tape is not None:
            tape.append(("linear", name, rec))
        if trace is not None:
            trace[name] = TraceEntry(x, y)
        return y

    def _quant_linear(self, x, lin, st, batch, keep):
        """Same arithmetic as :func:`tqe_forward`, batched over stacked tokens."""
        xq = fake_quant(x, st.aspec)
        dws = None
        if st.wspec.passthrough:
            wq = lin.weight
        elif st.wparams is not None:
            s, z = st.wparams.rows()
            if keep:
                wq, dws = kernels.fake_quant_rows_grad(lin.weight, s, z, st.wparams.bits)
            else:
                wq = kernels.fake_quant_rows(lin.weight, s, z, st.wparams.bits)
        else:
            wq = fake_quant(lin.weight, st.wspec)
        y = xq @ wq.T
        proj = mexp = None
        if st.tqe is not None:
            proj = xq @ st.tqe.alpha
            mexp = np.tile(self.layout.expand(st.tqe.m), batch)
            y = y + (mexp * proj)[:, None] * st.tqe.beta[None, :]
        y = y + lin.bias
        rec = {"st": st, "xq": xq, "wq": wq, "dws": dws, "proj": proj, "mexp": mexp} if keep else None
        return y, rec

    def forward(self, z: np.ndarray, qstate: QuantState | None = None, keep_tape: bool = False,
                keep_trace: bool = True) -> ForwardResult:
        single = z.ndim == 2
        zb = z[None] if single else z
        if zb.shape[1:] != (self.layout.n, self.cfg.d):
            raise ShapeError(f"latent must be {(self.layout.n, self.cfg.d)}, got {z.shape}")
        tape = [] if keep_tape else None
        trace: dict[str, TraceEntry] | None = {} if keep_trace else None
        blocks = []
        h = zb
        scale = 1.0 / np.sqrt(self.cfg.d)
        for b in range(self.cfg.layers):
            if self.cfg.block == "attention":
                pre = f"blocks.{b}.attn."
                q = self._linear(pre + "q", h, qstate, tape, trace)
                k = self._linear(pre + "k", h, qstate, tape, trace)
                v = self._linear(pre + "v", h, qstate, tape, trace)
                a = softmax_row(np.matmul(q, k.transpose(0, 2, 1)) * scale)
                ctx = np.matmul(a, v)
                if tape is not None:
                    tape.append(("attn", b, (q, k, v, a)))
                h = h + self._linear(pre + "o", ctx, qstate, tape, trace)
            pre = f"blocks.{b}.mlp."
            u = self._linear(pre + "fc1", h, qstate, tape, trace)
            g, th = kernels.gelu(u)
            if tape is not None:
                tape.append(("gelu", b, (u, th)))
            h = h + self._linear(pre + "fc2", g, qstate, tape, trace)
            blocks.append(h)
            if tape is not None:
                tape.append(("block_end", b, None))
        if single:
            h = h[0]
            blocks = [blk[0] for blk in blocks]
            if trace is not None:
                trace = {k: TraceEntry(e.x[0], e.out[0]) for k, e in trace.items()}
        return ForwardResult(h, trace, blocks, tape or [])

    # -- backward ----------------------------------------------------------

    def backward(self, result: ForwardResult, grad_out: np.ndarray,
                 grad_blocks: list[np.ndarray] | None = None):
        """Gradients of a scalar loss given dL/d(output).

        ``grad_blocks`` adds extra dL/d(block output) terms (per-block losses).
        Returns ``(param_grads, grad_z)``; ``param_grads[name]`` maps "s",
        "alpha", "beta", "m" to gradients summed over the batch.
        """
        if not result.tape:
            raise ValueError("forward was run without keep_tape=True")
        single = grad_out.ndim == 2
        scale = 1.0 / np.sqrt(self.cfg.d)
        grads: dict[str, dict[str, np.ndarray]] = {}
        stack = list(result.tape)
        dh = (grad_out[None] if single else grad_out).copy()

        def lin_back(item, dy):
            _, name, rec = item
            batch, n, d_out = dy.shape
            flat = dy.reshape(batch * n, d_out)
            if rec is None:
                dx = flat @ self.linears[name].weight
            else:
                dx = self._linear_backward(name, rec, flat, grads)
            return dx.reshape(batch, n, -1)

        while stack:
            kind, b, _ = stack.pop()
            if kind != "block_end":
                raise RuntimeError(f"unexpected tape entry {kind!r}")
            if grad_blocks is not None and grad_blocks[b] is not None:
                dh = dh + (grad_blocks[b][None] if single else grad_blocks[b])
            # fc2 <- gelu <- fc1, residual around both
            dg = lin_back(stack.pop(), dh)
            _, _, (u, th) = stack.pop()
            dh = dh + lin_back(stack.pop(), dg * kernels.gelu_grad(u, th))
            if self.cfg.block == "attention":
                dctx = lin_back(stack.pop(), dh)
                _, _, (q, k, v, a) = stack.pop()
                da = np.matmul(dctx, v.transpose(0, 2, 1))
                dv = np.matmul(a.transpose(0, 2, 1), dctx)
                ds = a * (da - np.sum(da * a, axis=2, keepdims=True))
                dq = np.matmul(ds, k) * scale
                dk = np.matmul(ds.transpose(0, 2, 1), q) * scale
                dh = dh + lin_back(stack.pop(), dv)
                dh = dh + lin_back(stack.pop(), dk)
                dh = dh + lin_back(stack.pop(), dq)
        return grads, (dh[0] if single else dh)

    def _linear_backward(self, name, rec, dy, grads):
        st: LayerQuantState = rec["st"]
        xq = rec["xq"]
        dxq = dy @ rec["wq"]
        g = {}
        if rec["dws"] is not None:
            g["s"] = np.sum((dy.T @ xq) * rec["dws"], axis=1)
        if st.tqe is not None:
            p = st.tqe
            proj, mexp = rec["proj"], rec["mexp"]
            g["beta"] = dy.T @ (mexp * proj)
            ddelta = dy @ p.beta
            dproj = ddelta * mexp
            g["alpha"] = xq.T @ dproj
            g["m"] = (ddelta * proj).reshape(-1, self.layout.frames, self.layout.spatial).sum(axis=(0, 2))
            dxq = dxq + np.outer(dproj, p.alpha)
        grads[name] = g
        # straight-through: dynamic min-max ranges never clip
        return dxq


def gelu(u: np.ndarray) -> np.ndarray:
    return kernels.gelu(u)[0]


def gelu_grad(u: np.ndarray) -> np.ndarray:
    return kernels.gelu_grad(u, kernels.gelu(u)[1])


def build_model(cfg: ToyDiTConfig) -> ToyDiT:
    rng = make_rng(cfg.seed)
    d, hidden = cfg.d, cfg.d * cfg.mlp_ratio
    linears: dict[str, Linear] = {}

    def add(name, d_out, d_in, std):
        w = rng.standard_normal((d_out, d_in)) * std
        linears[name] = Linear(w, rng.standard_normal(d_out) * 0.1)

    for b in range(cfg.layers):
        if cfg.block == "attention":
            for p in "qkv":
                add(f"blocks.{b}.attn.{p}", d, d, 1.0 / np.sqrt(d))
            add(f"blocks.{b}.attn.o", d, d, 0.5 / np.sqrt(d))
        add(f"blocks.{b}.mlp.fc1", hidden, d, np.sqrt(2.0 / d))
        add(f"blocks.{b}.mlp.fc2", d, hidden, 0.5 / np.sqrt(hidden))
    return ToyDiT(cfg, linears)


def forward_fp(model: ToyDiT, z: np.ndarray) -> tuple[np.ndarray, dict[str, TraceEntry]]:
    r = model.forward(z)
    return r.out, r.trace


def forward_quant(model: ToyDiT, z: np.ndarray, qstate: QuantState) -> tuple[np.ndarray, dict[str, TraceEntry]]:
    missing = [n for n in model.layer_names if n not in qstate]
    if missing:
        raise KeyError(f"quantization state missing for layers: {', '.join(missing)}")
    r = model.forward(z, qstate)
    return r.out, r.trace


def init_quant_state(model: ToyDiT, w_bits: int | None, a_bits: int | None,
                     overrides: dict[str, tuple[int | None, int | None]] | None = None) -> QuantState:
    """Per-channel weight params from min-max, dynamic per-token activations, no TQE."""
    overrides = overrides or {}
    unknown = sorted(set(overrides) - set(model.linears))
    if unknown:
        raise ValueError(f"bit overrides name unknown layers: {', '.join(unknown)}")
    state = {}
    for name, lin in model.linears.items():
        wb, ab = overrides.get(name, (w_bits, a_bits))
        wspec = QuantSpec(wb, "per_channel")
        wparams = None if wspec.passthrough else row_params(lin.weight, wb)
        state[name] = LayerQuantState(wspec, QuantSpec(ab, "per_token"), wparams)
    return state


def make_calibration_set(rng: np.random.Generator, layout: FrameLayout, d: int,
                         prompts: int, timesteps: int, step: float = 0.3) -> list[np.ndarray]:
    """Synthetic latents with temporal structure.

    Each prompt has a base first frame; each timestep scales it by a noise
    level, and frame i+1 = frame i + step * N(0, 1).
    """
    if prompts < 1 or timesteps < 1:
        raise ValueError("prompts and timesteps must be >= 1")
    out = []
    for _ in range(prompts):
        base = rng.standard_normal((layout.spatial, d))
        for k in range(timesteps):
            level = 0.5 + k / max(timesteps - 1, 1)
            frames = [base * level + 0.2 * rng.standard_normal((layout.spatial, d))]
            for _ in range(layout.frames - 1):
                frames.append(frames[-1] + step * rng.standard_normal((layout.spatial, d)))
            out.append(np.concatenate(frames, axis=0))
    return out
