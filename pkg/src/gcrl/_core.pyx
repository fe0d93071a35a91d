# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; see :mod:`gcrl._core_py` for the reference versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, isfinite

cnp.import_array()


def greedy_dagify(Py_ssize_t n, us, vs, order):
    cdef cnp.int64_t[::1] u_arr = np.ascontiguousarray(us, dtype=np.int64)
    cdef cnp.int64_t[::1] v_arr = np.ascontiguousarray(vs, dtype=np.int64)
    cdef cnp.int64_t[::1] ord_arr = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t m = u_arr.shape[0]
    keep_np = np.zeros(m, dtype=np.uint8)
    reach_np = np.zeros((n, n), dtype=np.uint8)
    cdef cnp.uint8_t[::1] keep = keep_np
    cdef cnp.uint8_t[:, ::1] reach = reach_np
    cdef Py_ssize_t k, idx, x, y, u, v
    for k in range(ord_arr.shape[0]):
        idx = ord_arr[k]
        u = u_arr[idx]
        v = v_arr[idx]
        if u == v or reach[v, u]:
            continue
        keep[idx] = 1
        for x in range(n):
            if x == u or reach[x, u]:
                reach[x, v] = 1
                for y in range(n):
                    if reach[v, y]:
                        reach[x, y] = 1
    return keep_np, reach_np


def penalty_gd(vhat, v, eu, ev, double delta, double mu, double lam_rank, double lr, Py_ssize_t steps):
    x_np = np.array(vhat, dtype=np.float64)
    cdef double[::1] x = x_np
    cdef double[::1] target = np.ascontiguousarray(v, dtype=np.float64)
    cdef cnp.int64_t[::1] u_arr = np.ascontiguousarray(eu, dtype=np.int64)
    cdef cnp.int64_t[::1] v_arr = np.ascontiguousarray(ev, dtype=np.int64)
    cdef Py_ssize_t b = x.shape[0]
    cdef Py_ssize_t m = u_arr.shape[0]
    losses_np = np.empty(steps + 1)
    cdef double[::1] losses = losses_np
    cdef double[::1] grad = np.empty(b)
    cdef Py_ssize_t t, i, e
    cdef double loss, d, gap, h, coef, inv_b = 1.0 / b, inv_m = 0.0
    if m:
        inv_m = 1.0 / m
    for t in range(steps + 1):
        loss = 0.0
        for i in range(b):
            d = x[i] - target[i]
            loss += d * d * inv_b
            grad[i] = 2.0 * inv_b * d
        for e in range(m):
            gap = x[v_arr[e]] - x[u_arr[e]]
            h = delta + gap
            coef = 0.0
            if h > 0.0:
                loss += mu * h * h * inv_m
                coef = 2.0 * mu * inv_m * h
            if lam_rank != 0.0:
                if gap > 0.0:
                    loss += lam_rank * inv_m * (gap + log1p(exp(-gap)))
                    coef += lam_rank * inv_m / (1.0 + exp(-gap))
                else:
                    loss += lam_rank * inv_m * log1p(exp(gap))
                    coef += lam_rank * inv_m * exp(gap) / (1.0 + exp(gap))
            grad[v_arr[e]] += coef
            grad[u_arr[e]] -= coef
        losses[t] = loss
        if not isfinite(loss):
            return x_np, losses_np, t
        if t == steps:
            break
        for i in range(b):
            x[i] -= lr * grad[i]
    return x_np, losses_np, -1


def sinkhorn_stack(logits, Py_ssize_t iters, double temp, double tol, Py_ssize_t max_iters):
    z_np = np.array(logits, dtype=np.float64, order="C") / temp
    squeeze = z_np.ndim == 2
    if squeeze:
        z_np = z_np[None]
    z_np = np.ascontiguousarray(z_np)
    cdef double[:, :, ::1] z = z_np
    cdef Py_ssize_t k, i, j, t, n = z.shape[1]
    cdef double m, acc, err
    for k in range(z.shape[0]):
        for t in range(max(iters, max_iters)):
            for j in range(n):
                m = z[k, 0, j]
                for i in range(1, n):
                    if z[k, i, j] > m:
                        m = z[k, i, j]
                acc = 0.0
                for i in range(n):
                    acc += exp(z[k, i, j] - m)
                acc = m + log(acc)
                for i in range(n):
                    z[k, i, j] -= acc
            for i in range(n):
                m = z[k, i, 0]
                for j in range(1, n):
                    if z[k, i, j] > m:
                        m = z[k, i, j]
                acc = 0.0
                for j in range(n):
                    acc += exp(z[k, i, j] - m)
                acc = m + log(acc)
                for j in range(n):
                    z[k, i, j] -= acc
            if t + 1 >= iters:
                # rows are exact after the row pass; stop once columns are too
                err = 0.0
                for j in range(n):
                    acc = 0.0
                    for i in range(n):
                        acc += exp(z[k, i, j])
                    if fabs(acc - 1.0) > err:
                        err = fabs(acc - 1.0)
                if err <= tol:
                    break
    out = np.exp(z_np)
    return out[0] if squeeze else out


cdef void _mm(const double* a, const double* b, double* c, Py_ssize_t n, bint ta, bint tb) noexcept nogil:
    # c = op(a) @ op(b) for n x n row-major blocks
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += (a[k * n + i] if ta else a[i * n + k]) * (b[j * n + k] if tb else b[k * n + j])
            c[i * n + j] = acc


cdef double _sqdist(const double* a, const double* b, Py_ssize_t n, bint ta) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double acc = 0.0, d
    for i in range(n):
        for j in range(n):
            d = (a[j * n + i] if ta else a[i * n + j]) - b[i * n + j]
            acc += d * d
    return acc


cdef void _axpy(double* y, const double* x, double c, Py_ssize_t len_) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(len_):
        y[i] += c * x[i]


cdef double _order_term(const double* x, double* g, double* pw, double* e, double* t1, double* t2,
                        Py_ssize_t n, Py_ssize_t m, double scale) noexcept nogil:
    # ||x^m - I||^2 * scale, adds its gradient into g; pw holds m+1 blocks
    cdef Py_ssize_t p, i, nn = n * n
    cdef double val = 0.0
    for i in range(nn):
        pw[i] = 0.0
    for i in range(n):
        pw[i * n + i] = 1.0
    for p in range(1, m + 1):
        _mm(&pw[(p - 1) * nn], x, &pw[p * nn], n, False, False)
    for i in range(nn):
        e[i] = pw[m * nn + i]
    for i in range(n):
        e[i * n + i] -= 1.0
    for i in range(nn):
        val += e[i] * e[i]
    for p in range(m):
        _mm(&pw[p * nn], e, t1, n, True, False)
        _mm(t1, &pw[(m - 1 - p) * nn], t2, n, False, True)
        _axpy(g, t2, 2.0 * scale, nn)
    return val * scale


def group_regs(W, P, pair_i, pair_j, orders):
    cdef double[:, :, ::1] w = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[:, :, ::1] pi = np.ascontiguousarray(P, dtype=np.float64)
    cdef cnp.int64_t[::1] ii = np.ascontiguousarray(pair_i, dtype=np.int64)
    cdef cnp.int64_t[::1] jj = np.ascontiguousarray(pair_j, dtype=np.int64)
    cdef cnp.int64_t[::1] ords = np.ascontiguousarray(orders, dtype=np.int64)
    cdef Py_ssize_t K = w.shape[0], d = w.shape[1], a = pi.shape[1]
    cdef Py_ssize_t dd = d * d, aa = a * a, npairs = ii.shape[0]
    gw_np = np.zeros((K, d, d))
    gp_np = np.zeros((K, a, a))
    cdef double[:, :, ::1] gw = gw_np
    cdef double[:, :, ::1] gp = gp_np
    clo_np = np.zeros(npairs, dtype=np.int64)
    inv_np = np.zeros(K, dtype=np.int64)
    cdef cnp.int64_t[::1] clo = clo_np
    cdef cnp.int64_t[::1] inv = inv_np
    cdef Py_ssize_t big = max(d, a)
    cdef Py_ssize_t mmax = 1
    cdef Py_ssize_t q
    for q in range(ords.shape[0]):
        if ords[q] > mmax:
            mmax = ords[q]
    cdef double[::1] cw = np.zeros(big * big)
    cdef double[::1] cp = np.zeros(big * big)
    cdef double[::1] t1 = np.zeros(big * big)
    cdef double[::1] t2 = np.zeros(big * big)
    cdef double[::1] pw = np.zeros((mmax + 1) * big * big)
    cdef Py_ssize_t i, j, l, p, r, best
    cdef double r_id = 0.0, r_clo = 0.0, r_inv = 0.0, r_ord = 0.0, cost, bcost, c, dv

    # identity anchoring and orthogonality
    for r in range(d):
        for q in range(d):
            dv = w[0, r, q] - (1.0 if r == q else 0.0)
            r_id += dv * dv
            gw[0, r, q] += 2.0 * dv
    for r in range(a):
        for q in range(a):
            dv = pi[0, r, q] - (1.0 if r == q else 0.0)
            r_id += dv * dv
            gp[0, r, q] += 2.0 * dv
    for i in range(K):
        _mm(&w[i, 0, 0], &w[i, 0, 0], &t1[0], d, True, False)
        for r in range(d):
            t1[r * d + r] -= 1.0
        for r in range(dd):
            r_id += t1[r] * t1[r] / K
        _mm(&w[i, 0, 0], &t1[0], &t2[0], d, False, False)
        _axpy(&gw[i, 0, 0], &t2[0], 4.0 / K, dd)

    # closure
    c = 1.0 / npairs
    for p in range(npairs):
        i = ii[p]
        j = jj[p]
        _mm(&w[i, 0, 0], &w[j, 0, 0], &cw[0], d, False, False)
        _mm(&pi[i, 0, 0], &pi[j, 0, 0], &cp[0], a, False, False)
        best = 0
        bcost = 0.0
        for l in range(K):
            cost = _sqdist(&cw[0], &w[l, 0, 0], d, False) + _sqdist(&cp[0], &pi[l, 0, 0], a, False)
            if l == 0 or cost < bcost:
                bcost = cost
                best = l
        clo[p] = best
        r_clo += c * bcost
        for r in range(dd):
            cw[r] -= w[best, r // d, r % d]
        for r in range(aa):
            cp[r] -= pi[best, r // a, r % a]
        _mm(&cw[0], &w[j, 0, 0], &t1[0], d, False, True)
        _axpy(&gw[i, 0, 0], &t1[0], 2.0 * c, dd)
        _mm(&w[i, 0, 0], &cw[0], &t1[0], d, True, False)
        _axpy(&gw[j, 0, 0], &t1[0], 2.0 * c, dd)
        _axpy(&gw[best, 0, 0], &cw[0], -2.0 * c, dd)
        _mm(&cp[0], &pi[j, 0, 0], &t1[0], a, False, True)
        _axpy(&gp[i, 0, 0], &t1[0], 2.0 * c, aa)
        _mm(&pi[i, 0, 0], &cp[0], &t1[0], a, True, False)
        _axpy(&gp[j, 0, 0], &t1[0], 2.0 * c, aa)
        _axpy(&gp[best, 0, 0], &cp[0], -2.0 * c, aa)

    # inverses
    c = 1.0 / K
    for i in range(K):
        best = 0
        bcost = 0.0
        for l in range(K):
            cost = _sqdist(&w[i, 0, 0], &w[l, 0, 0], d, True) + _sqdist(&pi[i, 0, 0], &pi[l, 0, 0], a, True)
            if l == 0 or cost < bcost:
                bcost = cost
                best = l
        inv[i] = best
        r_inv += c * bcost
        for r in range(d):
            for q in range(d):
                dv = w[i, q, r] - w[best, r, q]
                gw[i, q, r] += 2.0 * c * dv
                gw[best, r, q] -= 2.0 * c * dv
        for r in range(a):
            for q in range(a):
                dv = pi[i, q, r] - pi[best, r, q]
                gp[i, q, r] += 2.0 * c * dv
                gp[best, r, q] -= 2.0 * c * dv

    # finite orders
    for i in range(K):
        for q in range(ords.shape[0]):
            r_ord += _order_term(&w[i, 0, 0], &gw[i, 0, 0], &pw[0], &cw[0], &t1[0], &t2[0], d, ords[q], c)
            r_ord += _order_term(&pi[i, 0, 0], &gp[i, 0, 0], &pw[0], &cp[0], &t1[0], &t2[0], a, ords[q], c)
    return r_id, r_clo, r_inv, r_ord, gw_np, gp_np, clo_np, inv_np
