"""Pure numpy/Python fallbacks for the compiled kernels in ``_ckernels.pyx``.

Both modules expose the same four functions with identical semantics; the
fallback is selected when the extension is not built or when
``GAZEDETR_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """Lower a ``(B, C, H, W)`` array to ``(B*Ho*Wo, C*kh*kw)`` patch rows."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to an image."""
    B, C, H, W = shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def _solve(a, rows, cols):
    # shortest augmenting path with potentials; len(rows) <= len(cols)
    n, m = len(rows), len(cols)
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[rows[i0 - 1]]
            delta = inf
            j1 = 0
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[cols[j - 1]] - ui0 - v[j]
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
    out = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = cols[j - 1]
    return out


def solve_assignment(cost):
    """Optimal row->column assignment (rows <= cols), lexicographically smallest
    among the optimal ones. Returns an int64 array of column indices."""
    a = np.asarray(cost, dtype=np.float64).tolist()
    n = len(a)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    m = len(a[0])
    sol = _solve(a, list(range(n)), list(range(m)))
    best = sum(a[i][sol[i]] for i in range(n))
    tol = 1e-12 * max(1.0, abs(best))
    prefix = 0.0
    taken = set()
    for i in range(n):
        for j in range(sol[i]):
            if j in taken:
                continue
            head = prefix + a[i][j]
            rest_cols = [c for c in range(m) if c not in taken and c != j]
            rest_rows = list(range(i + 1, n))
            sub = _solve(a, rest_rows, rest_cols) if rest_rows else []
            total = head + sum(a[r][c] for r, c in zip(rest_rows, sub))
            if total <= best + tol:
                sol = sol[:i] + [j] + sub
                break
        prefix += a[i][sol[i]]
        taken.add(sol[i])
    return np.asarray(sol, dtype=np.int64)
