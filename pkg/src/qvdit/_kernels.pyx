# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise quantization kernels.

Single pass per row, no temporaries. Mirrors ``_kernels_py`` operation for
operation so both backends agree bit-for-bit.
"""
import numpy as np

from libc.math cimport nearbyint, frexp, ldexp

cdef double DEGENERATE_EPS = 1e-12


cdef inline double _pow2_at_least(double v) noexcept nogil:
    # smallest power of two >= v, never below 2^-1074
    cdef int e
    if frexp(v, &e) == 0.5:
        e = e - 1
    if e < -1074:
        e = -1074
    return ldexp(1.0, e)


cdef inline void _params(double lo, double hi, int bits, double* s, double* z) noexcept nogil:
    cdef double qmax = <double>((1 << bits) - 1)
    cdef double mid = <double>(1 << (bits - 1))
    cdef double ulp_floor
    cdef int e, eu
    if hi - lo < DEGENERATE_EPS:
        if lo == hi:
            if lo == 0.0:
                s[0] = DEGENERATE_EPS / qmax
            else:
                frexp(lo, &e)
                e = e - 53
                if e < -1074:
                    e = -1074
                s[0] = ldexp(1.0, e)
            z[0] = mid - nearbyint(lo / s[0])
        else:
            frexp(lo, &e)
            frexp(hi, &eu)
            if eu > e:
                e = eu
            e = e - 53
            if e < -1074:
                e = -1074
            ulp_floor = ldexp(1.0, e)
            s[0] = (hi - lo) / qmax
            if s[0] < ulp_floor:
                s[0] = ulp_floor
            s[0] = _pow2_at_least(s[0])
            z[0] = -nearbyint(lo / s[0])
    else:
        s[0] = (hi - lo) / qmax
        z[0] = -nearbyint(lo / s[0])


def params_from_range(lo, hi, int bits):
    cdef double[::1] lv = np.ascontiguousarray(lo, dtype=np.float64).reshape(-1)
    cdef double[::1] hv = np.ascontiguousarray(hi, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = lv.shape[0], i
    s = np.empty(n, dtype=np.float64)
    z = np.empty(n, dtype=np.float64)
    cdef double[::1] sv = s
    cdef double[::1] zv = z
    with nogil:
        for i in range(n):
            _params(lv[i], hv[i], bits, &sv[i], &zv[i])
    return s, z


def row_params(x, int bits):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], cols = xv.shape[1], i, j
    s = np.empty(rows, dtype=np.float64)
    z = np.empty(rows, dtype=np.float64)
    cdef double[::1] sv = s
    cdef double[::1] zv = z
    cdef double lo, hi, v
    with nogil:
        for i in range(rows):
            lo = xv[i, 0]
            hi = xv[i, 0]
            for j in range(1, cols):
                v = xv[i, j]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            _params(lo, hi, bits, &sv[i], &zv[i])
    return s, z


def quantize_rows(x, s, z, int bits):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], cols = xv.shape[1], i, j
    cdef double qmax = <double>((1 << bits) - 1)
    cdef double q
    out = np.empty((rows, cols), dtype=np.int64)
    cdef long long[:, ::1] ov = out
    with nogil:
        for i in range(rows):
            for j in range(cols):
                q = nearbyint(xv[i, j] / sv[i]) + zv[i]
                if q < 0.0:
                    q = 0.0
                elif q > qmax:
                    q = qmax
                ov[i, j] = <long long>q
    return out


cdef void _fq_rows(double[:, ::1] xv, double[::1] sv, double[::1] zv, int bits,
                   double[:, ::1] ov) noexcept nogil:
    cdef Py_ssize_t rows = xv.shape[0], cols = xv.shape[1], i, j
    cdef double qmax = <double>((1 << bits) - 1)
    cdef double q, si, zi
    for i in range(rows):
        si = sv[i]
        zi = zv[i]
        for j in range(cols):
            q = nearbyint(xv[i, j] / si) + zi
            if q < 0.0:
                q = 0.0
            elif q > qmax:
                q = qmax
            ov[i, j] = (q - zi) * si


def fake_quant_rows(x, s, z, int bits):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        _fq_rows(xv, sv, zv, bits, ov)
    return out


def fake_quant_rows_grad(x, s, z, int bits):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], cols = xv.shape[1], i, j
    cdef double qmax = <double>((1 << bits) - 1)
    cdef double ratio, r, raw, q, si, zi
    out = np.empty((rows, cols), dtype=np.float64)
    ds = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] dv = ds
    with nogil:
        for i in range(rows):
            si = sv[i]
            zi = zv[i]
            for j in range(cols):
                ratio = xv[i, j] / si
                r = nearbyint(ratio)
                raw = r + zi
                if raw < 0.0:
                    q = 0.0
                    dv[i, j] = q - zi
                elif raw > qmax:
                    q = qmax
                    dv[i, j] = q - zi
                else:
                    q = raw
                    dv[i, j] = r - ratio
                ov[i, j] = (q - zi) * si
    return out, ds


def fake_quant_dynamic(x, int bits):
    xc = np.ascontiguousarray(x, dtype=np.float64)
    s, z = row_params(xc, bits)
    out = np.empty(xc.shape, dtype=np.float64)
    cdef double[:, ::1] xv = xc
    cdef double[::1] sv = s
    cdef double[::1] zv = z
    cdef double[:, ::1] ov = out
    with nogil:
        _fq_rows(xv, sv, zv, bits, ov)
    return out


cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def gelu(u):
    """tanh-approximated GELU; returns (g, t) with t the inner tanh, reused by gelu_grad.

    tanh itself goes through numpy's vectorised routine, which is both faster
    than libm here and keeps this path bit-identical to the fallback.
    """
    uc = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] uv = uc.reshape(-1)
    arg = np.empty(uc.shape, dtype=np.float64)
    cdef double[::1] av = arg.reshape(-1)
    cdef Py_ssize_t i, n = uv.shape[0]
    cdef double x
    with nogil:
        for i in range(n):
            x = uv[i]
            av[i] = GELU_C * (x + GELU_A * (x * x * x))
    t = np.tanh(arg)
    g = np.empty(uc.shape, dtype=np.float64)
    cdef double[::1] tv = t.reshape(-1)
    cdef double[::1] gv = g.reshape(-1)
    with nogil:
        for i in range(n):
            gv[i] = 0.5 * uv[i] * (1.0 + tv[i])
    return g, t


def gelu_grad(u, t):
    uc = np.ascontiguousarray(u, dtype=np.float64)
    tc = np.ascontiguousarray(t, dtype=np.float64)
    cdef double[::1] uv = uc.reshape(-1)
    cdef double[::1] tv = tc.reshape(-1)
    out = np.empty(uc.shape, dtype=np.float64)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = uv.shape[0]
    cdef double x, th
    with nogil:
        for i in range(n):
            x = uv[i]
            th = tv[i]
            ov[i] = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return out
