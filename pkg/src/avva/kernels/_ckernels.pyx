# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython implementations of the hot numeric kernels.

Same contract as ``_pykernels``; selected automatically at import when the
extension has been compiled.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND = "cython"


def softmax_rows(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty_like(xa)
    cdef Py_ssize_t n = xa.shape[0], m = xa.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s, e
    for i in range(n):
        mx = xa[i, 0]
        for j in range(1, m):
            if xa[i, j] > mx:
                mx = xa[i, j]
        s = 0.0
        for j in range(m):
            e = exp(xa[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(m):
            out[i, j] /= s
    return out


def softmax_rows_grad(w, dw):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] wa = np.ascontiguousarray(w, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] da = np.ascontiguousarray(dw, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty_like(wa)
    cdef Py_ssize_t n = wa.shape[0], m = wa.shape[1]
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += da[i, j] * wa[i, j]
        for j in range(m):
            out[i, j] = wa[i, j] * (da[i, j] - inner)
    return out


def attend_batch(q, k, v, int n_heads):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] qa = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] ka = np.ascontiguousarray(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] va = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t b = qa.shape[0], tq = qa.shape[1], dim = qa.shape[2]
    cdef Py_ssize_t tk = ka.shape[1]
    if dim % n_heads != 0:
        raise ValueError(f"feature dim {dim} not divisible by {n_heads} heads")
    cdef Py_ssize_t dh = dim // n_heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] ctx = np.zeros((b, tq, dim), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] wgt = np.empty((b, n_heads, tq, tk), dtype=np.float64)
    cdef Py_ssize_t ib, h, iq, ik, d, off
    cdef double acc, mx, s, e
    for ib in range(b):
        for h in range(n_heads):
            off = h * dh
            for iq in range(tq):
                # scores for one query row, softmax in place
                mx = -1e308
                for ik in range(tk):
                    acc = 0.0
                    for d in range(dh):
                        acc += qa[ib, iq, off + d] * ka[ib, ik, off + d]
                    acc *= scale
                    wgt[ib, h, iq, ik] = acc
                    if acc > mx:
                        mx = acc
                s = 0.0
                for ik in range(tk):
                    e = exp(wgt[ib, h, iq, ik] - mx)
                    wgt[ib, h, iq, ik] = e
                    s += e
                for ik in range(tk):
                    wgt[ib, h, iq, ik] /= s
                for ik in range(tk):
                    e = wgt[ib, h, iq, ik]
                    for d in range(dh):
                        ctx[ib, iq, off + d] += e * va[ib, ik, off + d]
    return ctx, wgt


def true_match_ranks(sim):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sa = np.ascontiguousarray(sim, dtype=np.float64)
    cdef Py_ssize_t n = sa.shape[0]
    if sa.shape[1] != n:
        raise ValueError("similarity matrix must be square")
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ranks = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef double own
    cdef long long r
    for i in range(n):
        own = sa[i, i]
        r = 1
        for j in range(n):
            if sa[i, j] > own:
                r += 1
            elif sa[i, j] == own and j < i:
                r += 1
        ranks[i] = r
    return ranks
