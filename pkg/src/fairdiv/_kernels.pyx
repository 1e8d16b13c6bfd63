# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pure``.

The assignment kernels replay the exact floating-point operations of the
pure versions (same order, no FMA contraction — see setup.py), so the two
backends produce bit-identical assignment streams.  The solver iteration
differs only in summation order and agrees to rounding.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def pr_run(cnp.float64_t[:, ::1] values, cnp.float64_t[::1] budgets,
           cnp.float64_t[:, ::1] bids, long long iters):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t m = values.shape[1]
    cdef Py_ssize_t i, j
    cdef long long it
    cdef double u, p
    cdef cnp.float64_t[::1] prices = np.empty(m)
    cdef cnp.float64_t[:, ::1] vx = np.empty((n, m))
    for it in range(iters):
        for j in range(m):
            p = 0.0
            for i in range(n):
                p += bids[i, j]
            prices[j] = p
        for i in range(n):
            u = 0.0
            for j in range(m):
                vx[i, j] = values[i, j] * (bids[i, j] / prices[j])
                u += vx[i, j]
            for j in range(m):
                bids[i, j] = budgets[i] * (vx[i, j] / u)


def assign_utilitarian(cnp.float64_t[:, ::1] round_values, cnp.float64_t[::1] u):
    cdef Py_ssize_t T = round_values.shape[0]
    cdef Py_ssize_t n = round_values.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(T, dtype=np.int64)
    cdef Py_ssize_t t, q
    cdef long long k, r, seen
    cdef double vmax
    for t in range(T):
        vmax = round_values[t, 0]
        for q in range(1, n):
            if round_values[t, q] > vmax:
                vmax = round_values[t, q]
        k = 0
        for q in range(n):
            if round_values[t, q] == vmax:
                k += 1
        r = <long long>(u[t] * k)
        if r > k - 1:
            r = k - 1
        seen = 0
        for q in range(n):
            if round_values[t, q] == vmax:
                if seen == r:
                    out[t] = q
                    break
                seen += 1
    return out


def assign_por(cnp.float64_t[:, ::1] cdf, cnp.uint8_t[::1] dropped,
               cnp.int64_t[::1] arrivals, cnp.float64_t[::1] u, long long n):
    cdef Py_ssize_t T = arrivals.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(T, dtype=np.int64)
    cdef Py_ssize_t t
    cdef long long idx, j
    for t in range(T):
        j = arrivals[t]
        if dropped[j]:
            idx = <long long>(u[t] * n)
        else:
            idx = 0
            while idx < n and u[t] >= cdf[j, idx]:
                idx += 1
        if idx > n - 1:
            idx = n - 1
        out[t] = idx
    return out


def assign_pocr(cnp.float64_t[:, ::1] clique_cdf, cnp.int64_t[::1] members,
                cnp.int64_t[::1] offsets, cnp.float64_t[:, ::1] leader_values,
                cnp.uint8_t[::1] dropped, cnp.int64_t[::1] arrivals,
                cnp.float64_t[::1] u, long long n):
    cdef Py_ssize_t T = arrivals.shape[0]
    cdef Py_ssize_t s = clique_cdf.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(T, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] running_arr = np.zeros(members.shape[0])
    cdef cnp.float64_t[::1] running = running_arr
    cdef Py_ssize_t t, q
    cdef long long c, j, idx, k, base, best
    cdef double best_v
    for t in range(T):
        j = arrivals[t]
        if dropped[j]:
            idx = <long long>(u[t] * n)
            if idx > n - 1:
                idx = n - 1
            out[t] = idx
            continue
        c = 0
        while c < s - 1 and u[t] >= clique_cdf[j, c]:
            c += 1
        base = offsets[c]
        k = offsets[c + 1] - base
        if k == 1:
            out[t] = members[base]
            continue
        best = 0
        best_v = running[base]
        for q in range(1, k):
            if running[base + q] < best_v:
                best = q
                best_v = running[base + q]
        out[t] = members[base + best]
        running[base + best] = running[base + best] + leader_values[c, j]
    return out


def assign_uniform(cnp.float64_t[::1] u, long long n):
    cdef Py_ssize_t T = u.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(T, dtype=np.int64)
    cdef Py_ssize_t t
    cdef long long idx
    for t in range(T):
        idx = <long long>(u[t] * n)
        if idx > n - 1:
            idx = n - 1
        out[t] = idx
    return out


def assign_round_robin(long long T, long long n):
    return (np.arange(T, dtype=np.int64) % n)
