"""Blocked BigBird attention.

Queries and keys are reshaped into blocks of ``b`` tokens.  Each non-global
query block scores against a compact key tensor of ``g + w + r`` key blocks:
the global blocks, ``w`` circularly rolled copies of the key tensor, and
``r`` gathered random blocks.  Global query blocks attend to every key
directly.

Compact rows have a static width, so a key block can land in two slots of
one row (a wrapped window overlapping a global block, say).  Repeats are
flagged in ``duplicate_mask`` and excluded from the softmax, which keeps
the result equal to dense attention over the expanded mask.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .attn_ref import Hardmax, HeadParams, Softmax
from .pattern import BlockPatternConfig, Mode, build_global_itc, build_window, random_block_indices

__all__ = [
    "GLOBAL",
    "WINDOW",
    "RANDOM",
    "blockify",
    "unblockify",
    "roll_key_blocks",
    "gather_random_blocks",
    "BlockLayout",
    "block_layout",
    "CompactKeys",
    "assemble_compact",
    "attn_block_sparse",
    "FlopReport",
    "flop_count",
    "FLOP_CONVENTION",
]

GLOBAL, WINDOW, RANDOM = 0, 1, 2


def blockify(M, b: int) -> np.ndarray:
    """(n, d) -> (n/b, b, d); block j row s is source row j*b + s."""
    M = np.asarray(M)
    n = M.shape[0]
    if b < 1 or n % b:
        raise ValueError(f"sequence length {n} is not divisible by block size {b}")
    return M.reshape(n // b, b, *M.shape[1:])


def unblockify(T) -> np.ndarray:
    T = np.asarray(T)
    return T.reshape(T.shape[0] * T.shape[1], *T.shape[2:])


def window_offsets(w: int) -> range:
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window must be odd and positive (got {w})")
    half = (w - 1) // 2
    return range(-half, half + 1)


def roll_key_blocks(K, w: int) -> list[np.ndarray]:
    """``w`` copies of the blocked keys; copy for offset ``o`` holds block
    ``(j + o) mod n_blocks`` at row ``j``.  Ordered by offset, ascending."""
    K = np.asarray(K)
    return [np.roll(K, -o, axis=0) for o in window_offsets(w)]


def gather_random_blocks(K, rand) -> np.ndarray:
    """Row ``j`` slot ``t`` holds key block ``rand[j][t]``; (nb, r*b, d)."""
    K = np.asarray(K)
    idx = np.asarray(rand, dtype=np.intp).reshape(K.shape[0], -1)
    if idx.size and (idx.min() < 0 or idx.max() >= K.shape[0]):
        raise IndexError(f"random block index outside [0, {K.shape[0]})")
    gathered = K[idx]  # (nb, r, b, d)
    return gathered.reshape(K.shape[0], idx.shape[1] * K.shape[1], *K.shape[2:])


@dataclass(frozen=True, eq=False)
class BlockLayout:
    """Which key block feeds every compact slot, for one pattern.

    Block indices refer to the full (ETC-extended) sequence.  Rows that take
    no random blocks (the global rows) are padded with their own index.
    """

    block_size: int
    total_blocks: int
    global_blocks: int
    window_blocks: int
    body_start: int
    rand: np.ndarray  # (total_blocks, r)

    @property
    def slots(self) -> int:
        return self.global_blocks + self.window_blocks + self.rand.shape[1]

    @property
    def body_blocks(self) -> int:
        return self.total_blocks - self.body_start


def block_layout(cfg: BlockPatternConfig) -> BlockLayout:
    nb, g, w, r = cfg.n_blocks, cfg.global_blocks, cfg.window_blocks, cfg.random_blocks
    etc = cfg.mode is Mode.ETC
    forbidden = build_window(nb, w).union(build_global_itc(nb, 0 if etc else g))
    picks = random_block_indices(nb, r, cfg.seed, forbidden)
    start = g if etc else 0
    total = cfg.total_blocks
    rand = np.empty((total, r), dtype=np.intp)
    for row in range(total):
        rand[row] = row
    for j, p in enumerate(picks):
        if len(p) == r:
            rand[start + j] = np.asarray(p, dtype=np.intp) + start
        elif start + j >= g:
            raise ValueError(f"row block {j} got {len(p)} random blocks, expected {r}")
    return BlockLayout(cfg.block_size, total, g, w, start, rand)


@dataclass(frozen=True, eq=False)
class CompactKeys:
    keys: np.ndarray  # (total_blocks, slots*b, d)
    values: np.ndarray  # (total_blocks, slots*b, dv)
    origin: np.ndarray  # (total_blocks, slots) source block
    category: np.ndarray  # (total_blocks, slots) GLOBAL / WINDOW / RANDOM
    duplicate_mask: np.ndarray  # (total_blocks, slots)
    block_size: int

    def token_valid(self) -> np.ndarray:
        """(total_blocks, slots*b) true where a key token takes part in scoring."""
        return np.repeat(~self.duplicate_mask, self.block_size, axis=1)


def _origins(layout: BlockLayout):
    total, g, start = layout.total_blocks, layout.global_blocks, layout.body_start
    nbody = layout.body_blocks
    rows = np.arange(total)
    glob = np.broadcast_to(np.arange(g), (total, g))
    win = np.empty((total, layout.window_blocks), dtype=np.intp)
    for t, o in enumerate(window_offsets(layout.window_blocks)):
        win[:, t] = rows
        win[start:, t] = start + (rows[start:] - start + o) % nbody
    origin = np.hstack([glob, win, layout.rand]).astype(np.intp)
    category = np.repeat(
        np.array([GLOBAL] * g + [WINDOW] * layout.window_blocks + [RANDOM] * layout.rand.shape[1], dtype=np.uint8)[None, :],
        total,
        axis=0,
    )
    dup = np.zeros(origin.shape, dtype=bool)
    for s in range(1, origin.shape[1]):
        dup[:, s] = (origin[:, :s] == origin[:, s : s + 1]).any(axis=1)
    return origin, category, dup


def _window_part(Kb, layout: BlockLayout):
    """(total, w*b, d) window slots, built from rolled copies of the body."""
    start = layout.body_start
    rolled = np.stack(roll_key_blocks(Kb[start:], layout.window_blocks), axis=1)
    head = np.repeat(Kb[:start, None], layout.window_blocks, axis=1)
    part = np.concatenate([head, rolled], axis=0)
    return part.reshape(part.shape[0], -1, *Kb.shape[2:])


def assemble_compact(K, V, layout: BlockLayout) -> CompactKeys:
    """Concatenate global, window and random key/value blocks per row block."""
    Kb, Vb = np.asarray(K), np.asarray(V)
    if Kb.ndim != 3 or Kb.shape[:2] != (layout.total_blocks, layout.block_size):
        raise ValueError(f"keys of shape {Kb.shape} do not match the layout")
    if Vb.shape[:2] != Kb.shape[:2]:
        raise ValueError(f"values {Vb.shape} and keys {Kb.shape} disagree")
    origin, category, dup = _origins(layout)
    total, g = layout.total_blocks, layout.global_blocks
    parts_k, parts_v = [], []
    for src, parts in ((Kb, parts_k), (Vb, parts_v)):
        glob = src[:g].reshape(1, g * layout.block_size, *src.shape[2:])
        parts.append(np.broadcast_to(glob, (total,) + glob.shape[1:]))
        parts.append(_window_part(src, layout))
        parts.append(gather_random_blocks(src, layout.rand))
    keys = np.ascontiguousarray(np.concatenate(parts_k, axis=1))
    values = np.ascontiguousarray(np.concatenate(parts_v, axis=1))
    return CompactKeys(keys, values, origin, category, dup, layout.block_size)


def attn_block_sparse(X, heads, cfg: BlockPatternConfig, kind=Softmax()) -> np.ndarray:
    """Blocked attention for ``cfg``; equals the dense oracle on the expanded mask.

    ETC inputs carry the ``global_blocks * block_size`` global tokens as
    their first rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != cfg.total_tokens:
        raise ValueError(f"expected {cfg.total_tokens} input rows for this pattern, got {X.shape[0]}")
    heads = [heads] if isinstance(heads, HeadParams) else list(heads)
    if isinstance(kind, Hardmax):
        scale, hard = 1.0, True
    elif isinstance(kind, Softmax):
        scale, hard = kind.scale, False
    else:
        raise TypeError(f"unknown score kind {kind!r}")
    layout = block_layout(cfg)
    b, g = cfg.block_size, cfg.global_blocks
    gt = g * b
    out = np.zeros((X.shape[0], heads[0].W_V.shape[1]))
    all_keys = np.ones((1, X.shape[0]), dtype=np.uint8)
    for head in heads:
        Q = np.ascontiguousarray(X @ head.W_Q)
        K = np.ascontiguousarray(X @ head.W_K)
        V = np.ascontiguousarray(X @ head.W_V)
        ck = assemble_compact(blockify(K, b), blockify(V, b), layout)
        valid = np.ascontiguousarray(ck.token_valid()[g:], dtype=np.uint8)
        body = kernels.compact_attention(
            np.ascontiguousarray(blockify(Q, b)[g:]), ck.keys[g:], ck.values[g:], valid, scale, hard
        )
        out[gt:] += unblockify(body)
        if g:
            # global rows: direct multiplication against every key
            top = kernels.compact_attention(Q[None, :gt], K[None], V[None], all_keys, scale, hard)
            out[:gt] += top[0]
    return out


FLOP_CONVENTION = (
    "per attended (query, key) pair: 2*m for the score dot product, 4 for softmax "
    "(max-subtract, exp, sum, divide), 2*dv for the value mix; multiply-add = 2 flops; "
    "projections excluded; global rows counted dense; compact duplicate slots counted"
)


@dataclass(frozen=True)
class FlopReport:
    n_tokens: int
    dense_flops: int
    sparse_flops: int
    ratio: float
    sparse_intercept: int
    convention: str = FLOP_CONVENTION

    def to_dict(self) -> dict:
        return asdict(self)


def flop_count(cfg: BlockPatternConfig, d: int, heads: int = 1, m: int | None = None) -> FlopReport:
    """Closed-form cost of dense vs blocked attention for one layer.

    ``sparse_intercept`` is the constant term of the sparse count, which is
    affine in the sequence length: global rows add ``g*b*n`` pairs and the
    other rows ``(n - g*b) * (g+w+r) * b``.
    """
    m = d if m is None else m
    n = cfg.total_tokens
    b, g = cfg.block_size, cfg.global_blocks
    width = (g + cfg.window_blocks + cfg.random_blocks) * b
    per_pair = 2 * m + 4 + 2 * d
    dense = heads * per_pair * n * n
    sparse = heads * per_pair * (g * b * n + (n - g * b) * width)
    intercept = -heads * per_pair * g * b * width
    return FlopReport(n, dense, sparse, sparse / dense, intercept)
