# cython: language_level=3
"""Compiled hot kernels. Same contracts as ``refillkv._fallback``.

Inputs are validated by ``refillkv.numkernel``; these functions assume
C-contiguous arrays of a single floating dtype. Accumulation is done in
double and each output row depends only on its own inputs, so results are
bit-identical regardless of how many rows are processed per call.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, cos, sin, pow

cnp.import_array()

ctypedef fused real:
    float
    double


def matmul(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    dtype = np.float32 if real is float else np.float64
    out = np.empty((m, n), dtype=dtype)
    cdef real[:, ::1] c = out
    cdef double[::1] acc = np.empty(n, dtype=np.float64)
    cdef double aip
    for i in range(m):
        for j in range(n):
            acc[j] = 0.0
        for p in range(kk):
            aip = a[i, p]
            for j in range(n):
                acc[j] += aip * b[p, j]
        for j in range(n):
            c[i, j] = <real>acc[j]
    return out


def softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, total
    out = np.empty((m, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef double[::1] e = np.empty(n, dtype=np.float64)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        total = 0.0
        for j in range(n):
            e[j] = exp(x[i, j] - mx)
            total += e[j]
        for j in range(n):
            y[i, j] = <real>(e[j] / total)
    return out


def rmsnorm(real[:, ::1] x, real[::1] gain, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double ss, inv
    out = np.empty((m, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    for i in range(m):
        ss = 0.0
        for j in range(n):
            ss += <double>x[i, j] * x[i, j]
        inv = 1.0 / sqrt(ss / n + eps)
        for j in range(n):
            y[i, j] = <real>(x[i, j] * inv * gain[j])
    return out


def rope_apply(real[:, ::1] x, long long[::1] positions, Py_ssize_t head_dim, double base):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t half = head_dim // 2
    cdef Py_ssize_t n_heads = n // head_dim
    cdef Py_ssize_t r, h, i, o
    cdef double ang, c, s, x1, x2
    out = np.empty((m, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef double[::1] inv_freq = np.empty(half, dtype=np.float64)
    for i in range(half):
        inv_freq[i] = 1.0 / pow(base, (2.0 * i) / head_dim)
    for r in range(m):
        for i in range(half):
            ang = positions[r] * inv_freq[i]
            c = cos(ang)
            s = sin(ang)
            for h in range(n_heads):
                o = h * head_dim
                x1 = x[r, o + i]
                x2 = x[r, o + i + half]
                y[r, o + i] = <real>(x1 * c - x2 * s)
                y[r, o + i + half] = <real>(x2 * c + x1 * s)
    return out


def attention(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
              long long[::1] q_pos, long long[::1] k_pos, double scale):
    """Causal multi-head attention: query t sees key j iff k_pos[j] <= q_pos[t]."""
    cdef Py_ssize_t n_heads = q.shape[0], t_len = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t n = k.shape[1]
    cdef Py_ssize_t h, t, j, p
    cdef double mx, total, s, w
    out = np.zeros((n_heads, t_len, d), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] o = out
    cdef double[::1] scores = np.empty(max(n, 1), dtype=np.float64)
    cdef double[::1] acc = np.empty(d, dtype=np.float64)
    cdef char[::1] valid = np.empty(max(n, 1), dtype=np.int8)
    for h in range(n_heads):
        for t in range(t_len):
            mx = -1e300
            for j in range(n):
                valid[j] = k_pos[j] <= q_pos[t]
                if valid[j]:
                    s = 0.0
                    for p in range(d):
                        s += <double>q[h, t, p] * k[h, j, p]
                    s *= scale
                    scores[j] = s
                    if s > mx:
                        mx = s
            total = 0.0
            for p in range(d):
                acc[p] = 0.0
            for j in range(n):
                if valid[j]:
                    w = exp(scores[j] - mx)
                    total += w
                    for p in range(d):
                        acc[p] += w * v[h, j, p]
            if total > 0.0:
                for p in range(d):
                    o[h, t, p] = <real>(acc[p] / total)
    return out
