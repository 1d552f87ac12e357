"""Pure-Python jump-adapted Euler kernel.

Reference implementation of :func:`jump_euler_affine`; the compiled module
performs the same floating-point operations in the same order, so both give
bit-identical paths.
"""
from bisect import bisect_left, bisect_right
import math


def _action(t, x, breaks, edges, table, n_cells):
    return table[bisect_left(breaks, t) * n_cells + bisect_right(edges, x)]


def jump_euler_affine(
    grid_ptr, grid_t, dw, rem, ev_ptr, ev_idx, ev_mark, x0,
    coef, rem_scale, breaks, edges, table, M, guard,
    values, left, u_int, u_jump, applied, diverged,
):
    b0, bx, bu, s0, sx, su, g0, gx, gu, m1 = (float(c) for c in coef)
    breaks = [float(v) for v in breaks]
    edges = [float(v) for v in edges]
    table = [float(v) for v in table]
    n_cells = len(edges) + 1
    grid_t = grid_t.tolist()
    dw = dw.tolist()
    use_rem = rem_scale != 0.0
    rem = rem.tolist() if use_rem else None
    ev_idx = ev_idx.tolist()
    ev_mark = ev_mark.tolist()
    nan = math.nan

    for b in range(len(x0)):
        o = int(grid_ptr[b])
        n = int(grid_ptr[b + 1]) - o
        w = o - b
        e = int(ev_ptr[b])
        e_end = int(ev_ptr[b + 1])
        x = float(x0[b])
        values[o] = x
        left[o] = x
        diverged[b] = 0
        for i in range(n - 1):
            t1 = grid_t[o + i + 1]
            dt = t1 - grid_t[o + i]
            u = _action(t1, x, breaks, edges, table, n_cells)
            g = g0 + gx * x + gu * u
            drift = (b0 + bx * x + bu * u) - g * m1
            xn = x + drift * dt + (s0 + sx * x + su * u) * dw[w + i]
            if use_rem:
                xn = xn + g * rem_scale * rem[w + i]
            left[o + i + 1] = xn
            u_int[w + i] = u
            while e < e_end and ev_idx[e] == i + 1:
                uj = _action(t1, xn, breaks, edges, table, n_cells)
                u_jump[e] = uj
                mk = ev_mark[e]
                if abs(mk) < M:
                    xn = xn + (g0 + gx * xn + gu * uj) * mk
                    applied[e] = 1
                else:
                    applied[e] = 0
                e += 1
            values[o + i + 1] = xn
            x = xn
            if not abs(x) <= guard:
                diverged[b] = 1
                for k in range(i + 2, n):
                    values[o + k] = nan
                    left[o + k] = nan
                for k in range(i + 1, n - 1):
                    u_int[w + k] = nan
                while e < e_end:
                    applied[e] = 0
                    u_jump[e] = nan
                    e += 1
                break
