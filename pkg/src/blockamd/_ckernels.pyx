# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: CTC forward/backward, CTC prefix extension, edit distance."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double _lae(double a, double b) nogil:
    cdef double hi, lo
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        hi = a
        lo = b
    else:
        hi = b
        lo = a
    return hi + log1p(exp(lo - hi))


def ctc_alpha_beta(const double[:, ::1] logprobs, const long[::1] ext):
    """Log-space forward and backward lattices over the blank-extended target."""
    cdef Py_ssize_t T = logprobs.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t t, s
    alpha_np = np.full((T, S), -np.inf)
    beta_np = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np
    cdef double a
    if T == 0 or S == 0:
        return alpha_np, beta_np
    with nogil:
        alpha[0, 0] = logprobs[0, ext[0]]
        if S > 1:
            alpha[0, 1] = logprobs[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _lae(a, alpha[t - 1, s - 1])
                if s >= 2 and ext[s] != ext[0] and ext[s] != ext[s - 2]:
                    a = _lae(a, alpha[t - 1, s - 2])
                if a != -INFINITY:
                    alpha[t, s] = a + logprobs[t, ext[s]]
        beta[T - 1, S - 1] = logprobs[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = logprobs[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                a = beta[t + 1, s]
                if s + 1 < S:
                    a = _lae(a, beta[t + 1, s + 1])
                if s + 2 < S and ext[s] != ext[0] and ext[s] != ext[s + 2]:
                    a = _lae(a, beta[t + 1, s + 2])
                if a != -INFINITY:
                    beta[t, s] = a + logprobs[t, ext[s]]
    return alpha_np, beta_np


def prefix_extend(const double[:, ::1] logprobs, const double[::1] prev_nb,
                  const double[::1] prev_b, long token, long blank,
                  bint empty_prefix, bint repeat):
    """Extend a CTC prefix by ``token``; returns (r_nonblank, r_blank, log prefix mass)."""
    cdef Py_ssize_t T = logprobs.shape[0]
    cdef Py_ssize_t t
    nb_np = np.full(T, -np.inf)
    b_np = np.full(T, -np.inf)
    cdef double[::1] nb = nb_np
    cdef double[::1] b = b_np
    cdef double psi = -INFINITY
    cdef double phi
    if T == 0:
        return nb_np, b_np, psi
    with nogil:
        if empty_prefix:
            nb[0] = logprobs[0, token]
        psi = nb[0]
        for t in range(1, T):
            if repeat:
                phi = prev_b[t - 1]
            else:
                phi = _lae(prev_b[t - 1], prev_nb[t - 1])
            if phi != -INFINITY or nb[t - 1] != -INFINITY:
                nb[t] = _lae(nb[t - 1], phi) + logprobs[t, token]
            if nb[t - 1] != -INFINITY or b[t - 1] != -INFINITY:
                b[t] = _lae(nb[t - 1], b[t - 1]) + logprobs[t, blank]
            if phi != -INFINITY:
                psi = _lae(psi, phi + logprobs[t, token])
    return nb_np, b_np, psi


def edit_distance(const long[::1] ref, const long[::1] hyp):
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long sub, best
    prev_np = np.arange(m + 1, dtype=np.int64)
    cur_np = np.zeros(m + 1, dtype=np.int64)
    cdef long[::1] prev = prev_np
    cdef long[::1] cur = cur_np
    cdef long[::1] tmp
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if sub < best:
                best = sub
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
