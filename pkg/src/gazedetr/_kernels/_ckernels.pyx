# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: convolution lowering and the assignment solver."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((B * Ho * Wo, C * kh * kw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, oy, ox, i, j, iy, ix, r, col
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                r = (b * Ho + oy) * Wo + ox
                col = 0
                for c in range(C):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if 0 <= iy < H and 0 <= ix < W:
                                out[r, col] = x[b, c, iy, ix]
                            col += 1
    return out_arr


def col2im(double[:, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, oy, ox, i, j, iy, ix, r, col
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                r = (b * Ho + oy) * Wo + ox
                col = 0
                for c in range(C):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if 0 <= iy < H and 0 <= ix < W:
                                out[b, c, iy, ix] += cols[r, col]
                            col += 1
    return out_arr


cdef double _solve(double[:, ::1] a, Py_ssize_t[::1] rows, Py_ssize_t n,
                   Py_ssize_t[::1] cols, Py_ssize_t m, Py_ssize_t[::1] out):
    # shortest augmenting path with potentials; n <= m
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef char[::1] used = np.zeros(m + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, j0, j1, i0, ar
    cdef double delta, cur, ui0, total = 0.0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ar = rows[i0 - 1]
            delta = INFINITY
            j1 = 0
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[ar, cols[j - 1]] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = cols[j - 1]
    for i in range(n):
        total += a[rows[i], out[i]]
    return total


def solve_assignment(cost):
    a_arr = np.ascontiguousarray(cost, dtype=np.float64)
    cdef double[:, ::1] a = a_arr
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1] if a.shape[0] else 0
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cdef Py_ssize_t[::1] rows = np.arange(n, dtype=np.intp)
    cdef Py_ssize_t[::1] cols = np.arange(m, dtype=np.intp)
    cdef Py_ssize_t[::1] sol = np.zeros(n, dtype=np.intp)
    cdef Py_ssize_t[::1] sub = np.zeros(n, dtype=np.intp)
    cdef Py_ssize_t[::1] rest_cols = np.zeros(m, dtype=np.intp)
    cdef char[::1] taken = np.zeros(m, dtype=np.int8)
    cdef double best = _solve(a, rows, n, cols, m, sol)
    cdef double tol = 1e-12 * (fabs(best) if fabs(best) > 1.0 else 1.0)
    cdef double prefix = 0.0, total
    cdef Py_ssize_t i, j, c, k, nrest, nsub
    for i in range(n):
        for j in range(sol[i]):
            if taken[j]:
                continue
            nrest = 0
            for c in range(m):
                if not taken[c] and c != j:
                    rest_cols[nrest] = c
                    nrest += 1
            nsub = n - i - 1
            total = prefix + a[i, j]
            if nsub:
                _solve(a, rows[i + 1:], nsub, rest_cols, nrest, sub)
                for k in range(nsub):
                    total += a[i + 1 + k, sub[k]]
            if total <= best + tol:
                sol[i] = j
                for k in range(nsub):
                    sol[i + 1 + k] = sub[k]
                break
        prefix += a[i, sol[i]]
        taken[sol[i]] = 1
    return np.asarray(sol, dtype=np.int64)
