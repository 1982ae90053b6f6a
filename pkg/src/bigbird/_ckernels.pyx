# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled inner loops.  Signatures mirror :mod:`bigbird._pykernels`."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def compact_attention(const double[:, :, ::1] q,
                      const double[:, :, ::1] k,
                      const double[:, :, ::1] v,
                      const unsigned char[:, ::1] valid,
                      double scale,
                      bint hardmax):
    """Per row block: softmax/hardmax of ``q[j] @ k[j].T`` over valid slots, times ``v[j]``.

    q: (nb, b, m)   k: (nb, T, m)   v: (nb, T, dv)   valid: (nb, T)
    Rows with no valid slot are left as zeros.
    """
    cdef Py_ssize_t nb = q.shape[0], b = q.shape[1], m = q.shape[2]
    cdef Py_ssize_t T = k.shape[1], dv = v.shape[2]
    out_arr = np.zeros((nb, b, dv), dtype=np.float64)
    scores_arr = np.empty((b, T), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] s = scores_arr
    cdef Py_ssize_t j, i, t
    cdef double mx, total, val
    cdef int cnt
    cdef char transT = b'T', transN = b'N'
    cdef int iT = <int>T, ib = <int>b, im = <int>m, idv = <int>dv
    cdef double one = 1.0, zero = 0.0
    if nb == 0 or b == 0 or T == 0:
        return out_arr
    for j in range(nb):
        # scores (b x T, row-major) = q[j] @ k[j].T
        dgemm(&transT, &transN, &iT, &ib, &im, &scale,
              <double*>&k[j, 0, 0], &im, <double*>&q[j, 0, 0], &im,
              &zero, &s[0, 0], &iT)
        for i in range(b):
            mx = -INFINITY
            for t in range(T):
                if valid[j, t] and s[i, t] > mx:
                    mx = s[i, t]
            if mx == -INFINITY:
                for t in range(T):
                    s[i, t] = 0.0
                continue
            total = 0.0
            if hardmax:
                cnt = 0
                for t in range(T):
                    if valid[j, t] and s[i, t] == mx:
                        cnt += 1
                val = 1.0 / cnt
                for t in range(T):
                    s[i, t] = val if (valid[j, t] and s[i, t] == mx) else 0.0
            else:
                for t in range(T):
                    if valid[j, t]:
                        s[i, t] = exp(s[i, t] - mx)
                        total += s[i, t]
                    else:
                        s[i, t] = 0.0
                for t in range(T):
                    s[i, t] = s[i, t] / total
        # out[j] (b x dv) = weights @ v[j]
        dgemm(&transN, &transN, &idv, &ib, &iT, &one,
              <double*>&v[j, 0, 0], &idv, &s[0, 0], &iT,
              &zero, &out[j, 0, 0], &idv)
    return out_arr


def bfs_all_pairs(const int[::1] indptr, const int[::1] indices, Py_ssize_t n):
    """Hop distances from every node; -1 marks unreachable pairs."""
    dist_arr = np.full((n, n), -1, dtype=np.int32)
    queue_arr = np.empty(max(n, 1), dtype=np.int32)
    cdef int[:, ::1] dist = dist_arr
    cdef int[::1] queue = queue_arr
    cdef Py_ssize_t src, head, tail, e
    cdef int node, nbr
    for src in range(n):
        dist[src, src] = 0
        queue[0] = <int>src
        head = 0
        tail = 1
        while head < tail:
            node = queue[head]
            head += 1
            for e in range(indptr[node], indptr[node + 1]):
                nbr = indices[e]
                if dist[src, nbr] < 0:
                    dist[src, nbr] = dist[src, node] + 1
                    queue[tail] = nbr
                    tail += 1
    return dist_arr
