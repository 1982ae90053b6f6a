"""Dense generalized attention over an arbitrary token mask.

This is the trusted reference the blocked path is checked against, so it
stays deliberately simple: full score matrices, masking by ``-inf``.

Output is the residual-free sum over heads,

    out_i = sum_h  sigma( (x_i Wq_h) (X_{N(i)} Wk_h)^T ) (X_{N(i)} Wv_h)

The encoder adds ``x_i`` itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pattern import TokenMask

__all__ = [
    "HeadParams",
    "Softmax",
    "Hardmax",
    "EmptyNeighborhoodError",
    "masked_softmax",
    "attention_weights",
    "attn_dense",
    "FurthestResult",
    "furthest_vector",
    "furthest_brute_force",
    "practical_softmax",
]


class EmptyNeighborhoodError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HeadParams:
    W_Q: np.ndarray  # d x m
    W_K: np.ndarray  # d x m
    W_V: np.ndarray  # d x dv (dv = d for the encoder)

    def __post_init__(self):
        for name in ("W_Q", "W_K", "W_V"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.W_Q.ndim != 2 or self.W_Q.shape != self.W_K.shape:
            raise ValueError(f"W_Q {self.W_Q.shape} and W_K {self.W_K.shape} must match (d x m)")
        if self.W_V.ndim != 2 or self.W_V.shape[0] != self.W_Q.shape[0]:
            raise ValueError(f"W_V {self.W_V.shape} must have d={self.W_Q.shape[0]} rows")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def m(self) -> int:
        return self.W_Q.shape[1]

    @classmethod
    def random(cls, d, m, rng, scale=1.0, dv=None):
        dv = d if dv is None else dv
        return cls(
            scale * rng.standard_normal((d, m)),
            scale * rng.standard_normal((d, m)),
            scale * rng.standard_normal((d, dv)),
        )


@dataclass(frozen=True)
class Softmax:
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("softmax scale must be positive")


@dataclass(frozen=True)
class Hardmax:
    pass


def practical_softmax(m: int) -> Softmax:
    """The usual 1/sqrt(m) scaling, for benchmarks."""
    return Softmax(1.0 / math.sqrt(m))


def masked_softmax(scores) -> np.ndarray:
    """Stable softmax of the scores of one neighbor set."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyNeighborhoodError("softmax over an empty neighbor set")
    e = np.exp(s - s.max())
    return e / e.sum()


def _mask_array(mask, n):
    adj = mask.adjacency if isinstance(mask, TokenMask) else np.asarray(mask, dtype=bool)
    if adj.shape != (n, n):
        raise ValueError(f"mask shape {adj.shape} does not match sequence length {n}")
    empty = np.flatnonzero(~adj.any(axis=1))
    if empty.size:
        raise EmptyNeighborhoodError(f"row {int(empty[0])} of the mask has no neighbors")
    return adj


def attention_weights(X, head: HeadParams, mask, kind) -> np.ndarray:
    """Row-stochastic n x n weights of one head; zero off the mask."""
    X = np.asarray(X, dtype=np.float64)
    adj = _mask_array(mask, X.shape[0])
    scores = (X @ head.W_Q) @ (X @ head.W_K).T
    if isinstance(kind, Softmax):
        scores = kind.scale * scores
    scores = np.where(adj, scores, -np.inf)
    mx = scores.max(axis=1, keepdims=True)
    if isinstance(kind, Hardmax):
        w = (adj & (scores == mx)).astype(np.float64)
    elif isinstance(kind, Softmax):
        w = np.where(adj, np.exp(scores - mx), 0.0)
    else:
        raise TypeError(f"unknown score kind {kind!r}")
    return w / w.sum(axis=1, keepdims=True)


def attn_dense(X, heads, mask, kind=Softmax()) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite entries")
    heads = [heads] if isinstance(heads, HeadParams) else list(heads)
    out = np.zeros((X.shape[0], heads[0].W_V.shape[1]))
    for head in heads:
        out += attention_weights(X, head, mask, kind) @ (X @ head.W_V)
    return out


@dataclass(frozen=True, eq=False)
class FurthestResult:
    index: int
    vector: np.ndarray
    tie: bool


def _furthest_head(d: int) -> HeadParams:
    # inputs are [a; b] with a, b in R^d:  Q = -a,  K = a,  V = [0; a]
    eye, zero = np.eye(d), np.zeros((d, d))
    return HeadParams(
        W_Q=np.vstack([-eye, zero]),
        W_K=np.vstack([eye, zero]),
        W_V=np.block([[zero, eye], [zero, zero]]),
    )


def furthest_vector(U, tie_tol: float = 1e-12, norm_tol: float = 1e-9) -> list[FurthestResult]:
    """For each unit vector, the one furthest from it, via one hardmax
    full-attention layer on the embedding ``[u_i; 0]``.

    Rows whose best score is matched (within ``tie_tol``) by another
    candidate are flagged: hardmax would average them, which is not a
    valid answer.
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    n, d = U.shape
    if np.any(np.abs(np.linalg.norm(U, axis=1) - 1.0) > norm_tol):
        raise ValueError("furthest_vector expects unit vectors")
    X = np.hstack([U, np.zeros_like(U)])
    head = _furthest_head(d)
    full = np.ones((n, n), dtype=bool)
    weights = attention_weights(X, head, full, Hardmax())
    z = X + weights @ (X @ head.W_V)  # residual: z_i = [u_i; u_i*]
    scores = (X @ head.W_Q) @ (X @ head.W_K).T
    results = []
    for i in range(n):
        best = scores[i].max()
        near = np.count_nonzero(scores[i] >= best - tie_tol)
        tie = near > 1 or np.count_nonzero(weights[i]) > 1
        results.append(FurthestResult(int(np.argmax(weights[i])), z[i, d:].copy(), bool(tie)))
    return results


def furthest_brute_force(U) -> list[int]:
    """argmax_k ||u_k - u_j||^2 by explicit pairwise distances."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    diff = U[None, :, :] - U[:, None, :]
    return [int(i) for i in np.argmax((diff**2).sum(axis=2), axis=1)]
