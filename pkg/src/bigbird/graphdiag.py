"""Graph diagnostics for attention masks.

Masks are directed; every diagnostic here first symmetrizes (edge if
``A[i, j]`` or ``A[j, i]``) and drops self-loops, since path length,
clustering and expansion are properties of undirected graphs.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .pattern import _Mask

__all__ = [
    "DISCONNECTED",
    "ConvergenceError",
    "GraphReport",
    "undirected",
    "path_stats",
    "clustering_coefficient",
    "spectral_gap",
    "graph_report",
]

#: diameter reported for a disconnected graph
DISCONNECTED = math.inf


class ConvergenceError(RuntimeError):
    pass


def undirected(m) -> np.ndarray:
    adj = m.adjacency if isinstance(m, _Mask) else np.asarray(m, dtype=bool)
    sym = adj | adj.T
    np.fill_diagonal(sym, False)
    return sym


def _csr(sym: np.ndarray):
    indptr = np.zeros(sym.shape[0] + 1, dtype=np.int32)
    indptr[1:] = np.cumsum(sym.sum(axis=1))
    indices = np.nonzero(sym)[1].astype(np.int32)
    return indptr, indices


def path_stats(m) -> tuple[float, float, bool]:
    """(average shortest path, diameter, connected) by all-pairs BFS.

    The average runs over ordered pairs ``i != j`` that are connected.  A
    disconnected graph has diameter :data:`DISCONNECTED`.
    """
    sym = undirected(m)
    n = sym.shape[0]
    if n <= 1:
        return 0.0, 0, True
    indptr, indices = _csr(sym)
    dist = kernels.bfs_all_pairs(indptr, indices, n)
    off = ~np.eye(n, dtype=bool)
    reach = (dist > 0) & off
    connected = bool(reach.sum() == n * (n - 1))
    avg = float(dist[reach].mean()) if reach.any() else 0.0
    diameter = int(dist.max()) if connected else DISCONNECTED
    return avg, diameter, connected


def clustering_coefficient(m) -> float:
    """Mean local clustering; nodes of degree < 2 contribute 0."""
    a = undirected(m).astype(np.float64)
    deg = a.sum(axis=1)
    tri = np.einsum("ij,jk,ki->i", a, a, a) / 2.0
    pairs = deg * (deg - 1) / 2.0
    local = np.divide(tri, pairs, out=np.zeros_like(tri), where=pairs > 0)
    return float(local.mean()) if local.size else 0.0


def spectral_gap(m, iters: int = 10_000, tol: float = 1e-10, seed: int = 0) -> float:
    """|lambda_2| of D^-1/2 A D^-1/2 by power iteration.

    The top eigenvector D^1/2 1 is projected out every step.  The estimate is
    ``||M x||`` for unit ``x``, which also converges when the two largest
    remaining eigenvalues have equal modulus and opposite sign.
    """
    a = undirected(m).astype(np.float64)
    n = a.shape[0]
    if n < 2:
        raise ValueError("spectral gap needs at least two nodes")
    if not path_stats(a)[2]:
        raise ValueError("graph is disconnected: lambda_2 = 1 and deflation is meaningless")
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    M = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    top = np.sqrt(a.sum(axis=1))
    top /= np.linalg.norm(top)
    x = np.random.default_rng(seed).standard_normal(n)
    x -= top * (top @ x)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = M @ x
        y -= top * (top @ y)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if abs(new - est) < tol:
            return new
        est = new
    raise ConvergenceError(f"power iteration did not reach tol={tol} in {iters} iterations")


@dataclass(frozen=True)
class GraphReport:
    """Diagnostics of one mask.  ``clustering_coefficient`` is the mean of
    the local (per-node) coefficients, not global transitivity."""

    n_nodes: int
    avg_shortest_path: float
    diameter: float
    clustering_coefficient: float
    second_eigenvalue_modulus: float
    connected: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.diameter == DISCONNECTED:
            d["diameter"] = None
        else:
            d["diameter"] = int(self.diameter)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "GraphReport":
        d = json.loads(text)
        if d["diameter"] is None:
            d["diameter"] = DISCONNECTED
        return cls(**d)


def graph_report(m) -> GraphReport:
    """All diagnostics.  A disconnected graph reports |lambda_2| = 1, its exact
    value, rather than running the power iteration."""
    sym = undirected(m)
    avg, diam, connected = path_stats(sym)
    if sym.shape[0] < 2:
        lam = 0.0
    else:
        lam = spectral_gap(sym) if connected else 1.0
    return GraphReport(sym.shape[0], avg, diam, clustering_coefficient(sym), lam, connected)
