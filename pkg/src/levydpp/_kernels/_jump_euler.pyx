# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled jump-adapted Euler kernel (scalar state, affine coefficients).

Mirrors ``_fallback.jump_euler_affine`` operation for operation; build with
``-ffp-contract=off`` so no fused multiply-adds change the rounding.
"""
from libc.math cimport fabs, NAN

ctypedef long long i64


cdef inline double _action(double t, double x, const double[::1] breaks, const double[::1] edges,
                           const double[::1] table, Py_ssize_t n_cells) noexcept nogil:
    cdef Py_ssize_t seg = 0, cell = 0
    cdef Py_ssize_t nb = breaks.shape[0], ne = edges.shape[0]
    # segment k covers (breaks[k-1], breaks[k]]; cell j covers [edges[j-1], edges[j])
    while seg < nb and breaks[seg] < t:
        seg += 1
    while cell < ne and edges[cell] <= x:
        cell += 1
    return table[seg * n_cells + cell]


def jump_euler_affine(
    const i64[::1] grid_ptr, const double[::1] grid_t, const double[::1] dw, const double[::1] rem,
    const i64[::1] ev_ptr, const i64[::1] ev_idx, const double[::1] ev_mark, const double[::1] x0,
    const double[::1] coef, double rem_scale,
    const double[::1] breaks, const double[::1] edges, const double[::1] table,
    double M, double guard,
    double[::1] values, double[::1] left, double[::1] u_int, double[::1] u_jump,
    signed char[::1] applied, signed char[::1] diverged,
):
    cdef double b0 = coef[0], bx = coef[1], bu = coef[2]
    cdef double s0 = coef[3], sx = coef[4], su = coef[5]
    cdef double g0 = coef[6], gx = coef[7], gu = coef[8], m1 = coef[9]
    cdef Py_ssize_t n_cells = edges.shape[0] + 1
    cdef Py_ssize_t B = x0.shape[0]
    cdef Py_ssize_t b, i, k, o, n, w, e, e_end
    cdef double x, xn, t1, dt, u, uj, g, drift, mk
    cdef bint use_rem = rem_scale != 0.0

    with nogil:
        for b in range(B):
            o = grid_ptr[b]
            n = grid_ptr[b + 1] - o
            w = o - b
            e = ev_ptr[b]
            e_end = ev_ptr[b + 1]
            x = x0[b]
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
                    if fabs(mk) < M:
                        xn = xn + (g0 + gx * xn + gu * uj) * mk
                        applied[e] = 1
                    else:
                        applied[e] = 0
                    e += 1
                values[o + i + 1] = xn
                x = xn
                if not fabs(x) <= guard:
                    diverged[b] = 1
                    for k in range(i + 2, n):
                        values[o + k] = NAN
                        left[o + k] = NAN
                    for k in range(i + 1, n - 1):
                        u_int[w + k] = NAN
                    while e < e_end:
                        applied[e] = 0
                        u_jump[e] = NAN
                        e += 1
                    break
