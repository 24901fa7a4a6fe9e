"""Pure-numpy row-wise quantization kernels.

Reference path and fallback for the compiled ``_kernels`` module. Both must
produce bit-identical results: same IEEE operations in the same order.
"""
import numpy as np

DEGENERATE_EPS = 1e-12


def _exp_floor(v, shift):
    """2^(exponent(v) + shift), clamped at the smallest subnormal; v = m * 2^exponent, m in [0.5, 1)."""
    _, e = np.frexp(v)
    return np.ldexp(1.0, np.maximum(e + shift, -1074))


def _pow2_at_least(v):
    m, e = np.frexp(v)
    e = np.where(m == 0.5, e - 1, e)
    return np.ldexp(1.0, np.maximum(e, -1074))


def params_from_range(lo, hi, bits):
    """Per-row (scale, zero_point) from bounds, with the near-constant-range rules."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    qmax = float(2**bits - 1)
    mid = float(2 ** (bits - 1))
    degenerate = (hi - lo) < DEGENERATE_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(degenerate, 1.0, (hi - lo) / qmax)
        z = -np.rint(lo / s)
    if np.any(degenerate):
        s = s.copy()
        z = z.copy()
        lo_d, hi_d = lo[degenerate], hi[degenerate]
        const = lo_d == hi_d
        # constant: a power-of-two scale makes v / s an exact integer, so v reconstructs exactly
        s_const = np.where(lo_d == 0.0, DEGENERATE_EPS / qmax, _exp_floor(lo_d, -53))
        # tiny but non-zero range: power-of-two scale covering the range, standard zero-point
        ulp_floor = np.ldexp(1.0, np.maximum(np.maximum(np.frexp(lo_d)[1], np.frexp(hi_d)[1]) - 53, -1074))
        s_tiny = _pow2_at_least(np.maximum((hi_d - lo_d) / qmax, ulp_floor))
        sd = np.where(const, s_const, s_tiny)
        s[degenerate] = sd
        z[degenerate] = np.where(const, mid - np.rint(lo_d / sd), -np.rint(lo_d / sd))
    return s, z


def row_params(x, bits):
    x = np.asarray(x, dtype=np.float64)
    return params_from_range(x.min(axis=1), x.max(axis=1), bits)


def quantize_rows(x, s, z, bits):
    qmax = float(2**bits - 1)
    q = np.rint(x / s[:, None]) + z[:, None]
    return np.clip(q, 0.0, qmax).astype(np.int64)


def fake_quant_rows(x, s, z, bits):
    qmax = float(2**bits - 1)
    zc = z[:, None]
    q = np.clip(np.rint(x / s[:, None]) + zc, 0.0, qmax)
    return (q - zc) * s[:, None]


def fake_quant_rows_grad(x, s, z, bits):
    """Fake-quant plus the straight-through derivative w.r.t. each row's scale.

    Inside the clip range d(out)/ds = round(x/s) - x/s; on clipped entries
    the code is constant and d(out)/ds = code - z.
    """
    qmax = float(2**bits - 1)
    zc = z[:, None]
    ratio = x / s[:, None]
    r = np.rint(ratio)
    raw = r + zc
    q = np.clip(raw, 0.0, qmax)
    out = (q - zc) * s[:, None]
    clipped = (raw < 0.0) | (raw > qmax)
    dscale = np.where(clipped, q - zc, r - ratio)
    return out, dscale


def fake_quant_dynamic(x, bits):
    s, z = row_params(x, bits)
    return fake_quant_rows(x, s, z, bits)


GELU_C = 0.7978845608028654
GELU_A = 0.044715


def gelu(u):
    """tanh-approximated GELU; returns (g, t) with t the inner tanh, reused by gelu_grad."""
    t = np.tanh(GELU_C * (u + GELU_A * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
