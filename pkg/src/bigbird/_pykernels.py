"""Fallback inner loops in numpy and plain Python.

Same signatures and semantics as the compiled ``_ckernels`` module.
"""
from collections import deque

import numpy as np


def compact_attention(q, k, v, valid, scale, hardmax):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    nb, b, _ = q.shape
    if nb == 0 or b == 0 or k.shape[1] == 0:
        return np.zeros((nb, b, v.shape[2]))
    s = scale * np.matmul(q, k.transpose(0, 2, 1))
    keep = np.broadcast_to(valid[:, None, :], s.shape)
    s = np.where(keep, s, -np.inf)
    mx = s.max(axis=2, keepdims=True)
    empty = ~np.isfinite(mx)
    mx = np.where(empty, 0.0, mx)
    if hardmax:
        w = (keep & (s == mx)).astype(np.float64)
    else:
        w = np.where(keep, np.exp(s - mx), 0.0)
    total = w.sum(axis=2, keepdims=True)
    w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    return np.matmul(w, v)


def bfs_all_pairs(indptr, indices, n):
    dist = np.full((n, n), -1, dtype=np.int32)
    for src in range(n):
        row = dist[src]
        row[src] = 0
        queue = deque([src])
        while queue:
            node = queue.popleft()
            for e in range(indptr[node], indptr[node + 1]):
                nbr = indices[e]
                if row[nbr] < 0:
                    row[nbr] = row[node] + 1
                    queue.append(nbr)
    return dist
