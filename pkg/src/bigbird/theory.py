"""Executable universal-approximation machinery.

* the selective shift operator, directly and as a two-head hardmax attention;
* the contextual-mapping construction over the star graph, run layer by
  layer in exact rational arithmetic, with its phase bounds;
* the decoder step map g(i), h(i) and positional vector.

Grid inputs have ``n`` columns (tokens) of ``d`` coordinates; token ``i``
(1-based) has every coordinate in ``offset_i + {0, delta, ..., 1 - delta}``
with ``offset_i = delta**(-(i-1)*d)``.  A global token is prepended at index
0 and one coordinate is appended to every token (1 for the global token, 0
otherwise), so the working matrix is ``(n+1) x (d+1)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from math import isqrt

import numpy as np

from .attn_ref import Hardmax, HeadParams, attn_dense
from .pattern import TokenMask, build_star

__all__ = [
    "ShiftParams",
    "selective_shift",
    "shift_as_attention",
    "GridConfig",
    "GridBoundError",
    "OffGridError",
    "grid_points",
    "projection_vector",
    "phase_bounds",
    "printed_phase_bounds",
    "PhaseState",
    "run_contextual_mapping",
    "contextual_mapping",
    "check_phase_invariants",
    "enumerate_codes",
    "is_contextual_mapping",
    "decoder_step",
    "turing_pos_encoding",
    "MAX_GRID_POINTS",
]

MAX_GRID_POINTS = 10_000


@dataclass(frozen=True, eq=False)
class ShiftParams:
    u: np.ndarray
    b1: object
    b2: object
    rho: object
    graph: TokenMask


def _neighborhoods(graph: TokenMask, n_rows: int):
    if graph.size != n_rows:
        raise ValueError(f"graph has {graph.size} nodes, input has {n_rows} rows")
    rows = graph.rows()
    for i, r in enumerate(rows):
        if not r:
            raise ValueError(f"row {i} has an empty neighborhood")
    return rows


def selective_shift(X, p: ShiftParams) -> np.ndarray:
    """Shift coordinate 0 of every row whose projection ``u . x_i`` lies in
    ``[b1, b2]`` by ``rho * (max - min)`` of the projections over its
    neighborhood.  Other rows and coordinates are returned untouched.

    Works on float arrays and on object arrays of Fractions alike.
    """
    X = np.asarray(X)
    rows = _neighborhoods(p.graph, X.shape[0])
    proj = X @ np.asarray(p.u)
    out = X.copy()
    for i, nbrs in enumerate(rows):
        if p.b1 <= proj[i] <= p.b2:
            vals = [proj[j] for j in nbrs]
            out[i, 0] = X[i, 0] + p.rho * (max(vals) - min(vals))
    return out


def shift_as_attention(X, p: ShiftParams) -> np.ndarray:
    """The same shift as one residual attention call with two hardmax heads.

    Head one has query ``u.x_i - b1`` and key ``u.x_j``, so it picks the
    neighborhood max when ``u.x_i > b1`` and the min when ``u.x_i < b1``;
    head two does the same around ``b2`` with a negated value.  Their sum is
    ``max - min`` strictly inside ``(b1, b2)`` and 0 outside.  A constant-1
    coordinate carries the thresholds.  Inputs must avoid ``u.x_i`` equal
    to ``b1`` or ``b2``, where hardmax sees an all-zero score row.
    """
    X = np.asarray(X, dtype=np.float64)
    n, width = X.shape
    u = np.asarray(p.u, dtype=np.float64)
    Xa = np.hstack([X, np.ones((n, 1))])
    ua = np.append(u, 0.0)[:, None]
    W_K = ua
    value = np.zeros((width + 1, width + 1))
    value[:, 0] = float(p.rho) * ua[:, 0]
    heads = []
    for bound, sign in ((float(p.b1), 1.0), (float(p.b2), -1.0)):
        W_Q = ua.copy()
        W_Q[-1, 0] = -bound
        heads.append(HeadParams(W_Q, W_K, sign * value))
    out = Xa + attn_dense(Xa, heads, p.graph, Hardmax())
    return out[:, :width]


class GridBoundError(ValueError):
    pass


class OffGridError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    n: int
    d: int
    delta: Fraction

    def __post_init__(self):
        delta = Fraction(self.delta)
        object.__setattr__(self, "delta", delta)
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if not 0 < delta <= 1 or delta.numerator != 1:
            raise ValueError(f"1/delta must be a positive integer (delta={delta})")

    @property
    def steps(self) -> int:
        return self.delta.denominator

    @property
    def n_points(self) -> int:
        return self.steps ** (self.d * self.n)

    def offset(self, i: int) -> Fraction:
        """Offset of token ``i`` (1-based)."""
        return self.delta ** (-(i - 1) * self.d)


def grid_points(cfg: GridConfig):
    """Every grid input as an n x d object array of Fractions."""
    if cfg.n_points > MAX_GRID_POINTS:
        raise GridBoundError(f"grid has {cfg.n_points} points, above the cap of {MAX_GRID_POINTS}")
    levels = [cfg.delta * k for k in range(cfg.steps)]
    offsets = [cfg.offset(i + 1) for i in range(cfg.n)]
    for combo in itertools.product(levels, repeat=cfg.n * cfg.d):
        P = np.empty((cfg.n, cfg.d), dtype=object)
        for i in range(cfg.n):
            for j in range(cfg.d):
                P[i, j] = offsets[i] + combo[i * cfg.d + j]
        yield P


class _Constants:
    """Exact constants of the construction for one grid."""

    def __init__(self, cfg: GridConfig):
        if cfg.delta > Fraction(1, 2):
            raise ValueError("the construction needs delta <= 1/2 for its buckets to separate")
        n, d, de = cfg.n, cfg.d, cfg.delta
        self.cfg = cfg
        self.D = de ** (-d)  # low-shift magnitude
        self.C = de ** (-n * d)  # high-shift magnitude
        self.final_rho = de ** (-n * n * d)
        self.A = de ** (-(n + 1) * d) + 1
        self.B = self.C * (self.D - 1)
        self.F0 = de ** (-(n + 1) * d)
        sigma = sum(de ** (-j) for j in range(d))
        self.lo = [sigma * cfg.offset(i) for i in range(1, n + 1)]
        self.up = [sigma * (cfg.offset(i) + 1) for i in range(1, n + 1)]
        self.u = np.array([de ** (-j) for j in range(d)] + [self.F0], dtype=object)

    def global_after(self, k: int, l) -> Fraction:
        """Projection of the global token after phase ``k`` as a function of
        the initial projections ``l`` (0-based list)."""
        n, A, B, C, F0 = self.cfg.n, self.A, self.B, self.C, self.F0
        if k == 0:
            return F0
        if k < n:
            val = A**k * F0 - A ** (k - 1) * B * l[0] - C * l[k]
            val -= sum(A ** (k - t) * (B + A * C) * l[t - 1] for t in range(2, k + 1))
            return val
        if n == 1:
            # the global token's own projection is the neighborhood minimum
            return (A - C) * F0 - B * l[0]
        val = (A**n - C * self.D) * F0 - B * (A ** (n - 1) - 1) * l[0]
        val -= sum(A ** (n - t) * (B + A * C) * l[t - 1] for t in range(2, n + 1))
        return val


def projection_vector(cfg: GridConfig) -> np.ndarray:
    """``u = [1, 1/delta, ..., delta^-(d-1), delta^-(n+1)d]``."""
    return _Constants(cfg).u.copy()


def phase_bounds(k: int, cfg: GridConfig) -> tuple[Fraction, Fraction]:
    """Exact ``(S_k, T_k)`` with ``S_k < f0_k < T_k`` for every grid input.

    ``f0_k`` is affine and decreasing in each initial projection ``l_i``, and
    ``lo_i <= l_i < up_i``; ``S_k`` substitutes the (unattained) upper ends and
    ``T_k`` the lower ends plus ``delta``.  ``k = 0`` gives
    ``(delta^-(n+1)d, delta^-(n+1)d + delta)``.
    """
    if not 0 <= k <= cfg.n:
        raise ValueError(f"phase {k} outside [0, {cfg.n}]")
    c = _Constants(cfg)
    if k == 0:
        return c.F0, c.F0 + cfg.delta
    return c.global_after(k, c.up), c.global_after(k, c.lo) + cfg.delta


def printed_phase_bounds(k: int, cfg: GridConfig) -> tuple[Fraction, Fraction]:
    """An uncorrected closed form of the upper/lower bound recursions,
    returned as ``(S_k, T_k)``.

    Kept for comparison only: its coefficients carry sign errors, and at toy
    sizes it gives ``S_k > T_k`` (see tests).  :func:`phase_bounds` is what
    the construction uses.
    """
    n, d, de = cfg.n, cfg.d, cfg.delta
    if k == 0:
        return de ** (-(n + 1) * d), de ** (-(n + 1) * d) + de
    A = de ** (-(n + 1) * d) + 1
    mid = 2 * de ** (-n * d - d) + de ** (-n * d) + 1
    lead = A**k * de ** (-n * d)
    tail = A ** (k - 1) * (de ** (-n * d - d) + de ** (-n * d))
    T = lead - sum(A ** (k - t) * mid * de ** (-t * d) for t in range(2, k + 1)) - tail * de ** (-d)
    T -= de ** (-(k + 1) * d)
    S = lead - sum(A ** (k - t) * mid * de ** (-(t - 1) * d) for t in range(2, k + 1)) - tail
    S -= de ** (-k * d)
    return S, T


@dataclass(frozen=True, eq=False)
class PhaseState:
    k: int
    X: np.ndarray
    l: tuple  # initial projections of tokens 1..n
    proj: tuple  # projections of tokens 0..n after the phase
    S: Fraction
    T: Fraction

    @property
    def f0(self) -> Fraction:
        return self.proj[0]

    @property
    def f(self) -> tuple:
        """Projections of the tokens already shifted (1..k)."""
        return self.proj[1 : self.k + 1]


def _sweep(start: Fraction, stop: Fraction, step: Fraction):
    v = start
    while v < stop:
        yield v
        v += step


def _check_on_grid(P, cfg: GridConfig):
    P = np.asarray(P, dtype=object)
    if P.shape != (cfg.n, cfg.d):
        raise OffGridError(f"input has shape {P.shape}, grid expects {(cfg.n, cfg.d)}")
    out = np.empty(P.shape, dtype=object)
    for i in range(cfg.n):
        off = cfg.offset(i + 1)
        for j in range(cfg.d):
            x = Fraction(P[i, j])
            level = (x - off) / cfg.delta
            if level.denominator != 1 or not 0 <= level < cfg.steps:
                raise OffGridError(f"entry ({i}, {j}) = {x} is not on the grid")
            out[i, j] = x
    return out


def run_contextual_mapping(P, cfg: GridConfig):
    """Run every shift layer on grid input ``P``.

    Returns ``(codes, states)``: the final projections of tokens 1..n and the
    state after each phase (index 0 is the initial state).
    """
    c = _Constants(cfg)
    n, d, de = cfg.n, cfg.d, cfg.delta
    P = _check_on_grid(P, cfg)
    X = np.empty((n + 1, d + 1), dtype=object)
    X[0, :d] = Fraction(0)
    X[0, d] = Fraction(1)
    X[1:, :d] = P
    X[1:, d] = Fraction(0)
    star = build_star(n)
    l = tuple(X[1:] @ c.u)
    bounds = [phase_bounds(k, cfg) for k in range(n + 1)]
    states = [PhaseState(0, X.copy(), l, tuple(X @ c.u), *bounds[0])]
    half = de / 2
    for k in range(1, n + 1):
        for v in _sweep(c.lo[k - 1], c.up[k - 1], de):
            X = selective_shift(X, ShiftParams(c.u, v - half, v + half, c.D, star))
        S_prev, T_prev = bounds[k - 1]
        for v in _sweep(S_prev, T_prev, de):
            X = selective_shift(X, ShiftParams(c.u, v - half, v + half, c.C, star))
        states.append(PhaseState(k, X.copy(), l, tuple(X @ c.u), *bounds[k]))
    # separate every token using the global token's full-context value
    for v in _sweep(bounds[0][1], bounds[n][1], de):
        X = selective_shift(X, ShiftParams(c.u, v - half, v + half, c.final_rho, star))
    codes = tuple((X @ c.u)[1:])
    return codes, states


def contextual_mapping(P, cfg: GridConfig) -> tuple:
    return run_contextual_mapping(P, cfg)[0]


def check_phase_invariants(states) -> list[str]:
    """Violations of the per-phase invariants; empty when all hold.

    * ``S_k < f0_k < T_k`` for every phase ``k >= 1`` (``S_0 <= f0_0 < T_0``);
    * ``T_{k-1} <= f_k < S_k``;
    * ``l_{k+1} < ... < l_n < f_1 < ... < f_k < f0_k``.
    """
    problems = []
    s0 = states[0]
    if not s0.S <= s0.f0 < s0.T:
        problems.append(f"phase 0: f0={s0.f0} outside [{s0.S}, {s0.T})")
    for prev, st in zip(states, states[1:]):
        k = st.k
        if not st.S < st.f0 < st.T:
            problems.append(f"phase {k}: f0={st.f0} outside ({st.S}, {st.T})")
        fk = st.proj[k]
        if not prev.T <= fk < st.S:
            problems.append(f"phase {k}: f_{k}={fk} outside [{prev.T}, {st.S})")
        order = list(st.l[k:]) + list(st.f) + [st.f0]
        if any(a >= b for a, b in zip(order, order[1:])):
            problems.append(f"phase {k}: ordering broken: {order}")
        if tuple(st.proj[k + 1 :]) != tuple(st.l[k:]):
            problems.append(f"phase {k}: an untargeted token moved")
    return problems


def enumerate_codes(cfg: GridConfig, check=True):
    """``[(P, codes)]`` over the whole grid; raises on an invariant failure."""
    table = []
    for P in grid_points(cfg):
        codes, states = run_contextual_mapping(P, cfg)
        if check:
            problems = check_phase_invariants(states)
            if problems:
                raise AssertionError(f"input {P.tolist()}: " + "; ".join(problems))
        table.append((P, codes))
    return table


def is_contextual_mapping(table) -> bool:
    """Entries distinct within each code vector and across all inputs."""
    flat = [c for _, codes in table for c in codes]
    return len(set(flat)) == len(flat)


def decoder_step(i: int) -> int:
    """g(i) = floor((-1 + sqrt(1 + 8i)) / 2), in integer arithmetic."""
    if i < 0:
        raise ValueError("step index must be non-negative")
    return (isqrt(1 + 8 * i) - 1) // 2


def turing_pos_encoding(i: int, prefix_zeros: int = 0):
    """``(g(i), h(i), pos)`` with ``h(i) = g(i+1) - g(i)`` and
    ``pos = [0]*prefix_zeros + [1, g+1, 1/(g+1), 1/(g+1)^2, h, 0, 0, 0, 0]``.

    ``h(i)`` is 1 exactly when ``i + 1`` is a triangular number.
    """
    g = decoder_step(i)
    h = decoder_step(i + 1) - g
    tail = [Fraction(1), Fraction(g + 1), Fraction(1, g + 1), Fraction(1, (g + 1) ** 2), Fraction(h)]
    return g, h, [Fraction(0)] * prefix_zeros + tail + [Fraction(0)] * 4
