"""Block-level sparsity patterns: window, random, global, their union, and
the small graphs used by the theory constructions (star, decoder graph).

Masks are immutable boolean adjacency matrices.  ``A[i, j]`` is true iff
query ``i`` attends to key ``j``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PatternError",
    "Mode",
    "BlockPatternConfig",
    "BlockMask",
    "TokenMask",
    "EdgeList",
    "build_window",
    "build_global_itc",
    "build_random",
    "random_block_indices",
    "build_bigbird",
    "bigbird_components",
    "expand_to_tokens",
    "extend_etc",
    "build_star",
    "build_turing_decoder_graph",
    "to_pbm",
    "from_pbm",
    "to_csv",
    "from_csv",
    "MASK_CSV_SCHEMA",
]

MASK_CSV_SCHEMA = "bigbird-mask-csv/1"
_MASK64 = (1 << 64) - 1


class PatternError(ValueError):
    """Invalid pattern configuration."""


class Mode(str, enum.Enum):
    ITC = "itc"
    ETC = "etc"


class _Mask:
    """Square boolean adjacency held read-only."""

    __slots__ = ("_adj",)

    def __init__(self, adjacency):
        adj = np.array(adjacency, dtype=bool, copy=True)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        adj.setflags(write=False)
        self._adj = adj

    @property
    def adjacency(self) -> np.ndarray:
        return self._adj

    @property
    def size(self) -> int:
        return self._adj.shape[0]

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self._adj[i]))

    def rows(self) -> list[tuple[int, ...]]:
        return [self.neighbors(i) for i in range(self.size)]

    @property
    def num_edges(self) -> int:
        return int(self._adj.sum())

    def union(self, other):
        if type(other) is not type(self) or other.size != self.size:
            raise ValueError("union needs two masks of the same kind and size")
        return type(self)(self._adj | other._adj)

    @classmethod
    def from_neighbors(cls, n: int, rows):
        adj = np.zeros((n, n), dtype=bool)
        for i, cols in enumerate(rows):
            adj[i, list(cols)] = True
        return cls(adj)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return np.array_equal(self._adj, other._adj)

    def __hash__(self):
        return hash((type(self).__name__, self._adj.shape, self._adj.tobytes()))

    def __repr__(self):
        return f"{type(self).__name__}(size={self.size}, edges={self.num_edges})"


class BlockMask(_Mask):
    """Adjacency between blocks of ``b`` contiguous tokens."""

    __slots__ = ()

    @property
    def n_blocks(self) -> int:
        return self.size


class TokenMask(_Mask):
    """Adjacency between individual tokens."""

    __slots__ = ()

    @property
    def n(self) -> int:
        return self.size


@dataclass(frozen=True)
class EdgeList:
    n_nodes: int
    edges: tuple[tuple[int, int], ...]

    def to_token_mask(self) -> TokenMask:
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for u, v in self.edges:
            adj[u, v] = True
        return TokenMask(adj)


@dataclass(frozen=True)
class BlockPatternConfig:
    """A BigBird pattern.  ``window_blocks``, ``random_blocks`` and
    ``global_blocks`` count blocks, not tokens.

    In ETC mode ``n_tokens`` counts the ordinary tokens only; the
    ``global_blocks * block_size`` extra global tokens are prepended on top.
    """

    n_tokens: int
    block_size: int
    window_blocks: int = 3
    random_blocks: int = 0
    global_blocks: int = 0
    mode: Mode = Mode.ITC
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        n, b = self.n_tokens, self.block_size
        w, r, g = self.window_blocks, self.random_blocks, self.global_blocks
        if n < 1 or b < 1:
            raise PatternError(f"n_tokens and block_size must be positive (got {n}, {b})")
        if n % b:
            raise PatternError(f"n_tokens={n} is not a multiple of block_size={b}; pad the input")
        if w < 1 or w % 2 == 0:
            raise PatternError(f"window_blocks must be odd and positive (got {w})")
        if r < 0 or g < 0:
            raise PatternError("random_blocks and global_blocks must be non-negative")
        if not 0 <= self.seed <= _MASK64:
            raise PatternError("seed must fit in an unsigned 64-bit integer")
        nb = n // b
        if w > nb:
            raise PatternError(f"window_blocks={w} exceeds n_blocks={nb}")
        if g + w + r > nb:
            raise PatternError(f"g + w + r = {g + w + r} exceeds n_blocks={nb}")

    @property
    def n_blocks(self) -> int:
        """Blocks of ordinary tokens (excludes ETC's prepended globals)."""
        return self.n_tokens // self.block_size

    @property
    def total_blocks(self) -> int:
        if self.mode is Mode.ETC:
            return self.n_blocks + self.global_blocks
        return self.n_blocks

    @property
    def total_tokens(self) -> int:
        return self.total_blocks * self.block_size

    @property
    def global_tokens(self) -> int:
        return self.global_blocks * self.block_size


def _check_window(n_blocks: int, w: int):
    if w < 1 or w % 2 == 0:
        raise PatternError(f"window must be odd and positive (got {w})")
    if w > n_blocks:
        raise PatternError(f"window {w} exceeds n_blocks={n_blocks}")


def build_window(n_blocks: int, w: int) -> BlockMask:
    """Circular band: row ``j`` sees ``j - (w-1)/2 .. j + (w-1)/2`` mod ``n_blocks``."""
    _check_window(n_blocks, w)
    half = (w - 1) // 2
    adj = np.zeros((n_blocks, n_blocks), dtype=bool)
    rows = np.arange(n_blocks)
    for off in range(-half, half + 1):
        adj[rows, (rows + off) % n_blocks] = True
    return BlockMask(adj)


def build_global_itc(n_blocks: int, g: int) -> BlockMask:
    if not 0 <= g <= n_blocks:
        raise PatternError(f"global blocks {g} outside [0, {n_blocks}]")
    adj = np.zeros((n_blocks, n_blocks), dtype=bool)
    adj[:g, :] = True
    adj[:, :g] = True
    return BlockMask(adj)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _row_stream(seed: int, row: int) -> np.random.Generator:
    return np.random.default_rng(_splitmix64(_splitmix64(seed) ^ row))


def random_block_indices(n_blocks: int, r: int, seed: int, forbidden: BlockMask) -> list[list[int]]:
    """Per-row sorted random picks, ``min(r, available)`` per row.

    Each row draws from its own stream keyed on ``(seed, row)``, so a row's
    picks do not depend on how many rows exist or the order they are built in.
    """
    if forbidden.n_blocks != n_blocks:
        raise PatternError("forbidden mask has the wrong number of blocks")
    if r < 0:
        raise PatternError("random blocks must be non-negative")
    out = []
    for row in range(n_blocks):
        if r == 0:
            out.append([])
            continue
        avail = np.flatnonzero(~forbidden.adjacency[row])
        k = min(r, avail.size)
        if k == 0:
            out.append([])
            continue
        picks = _row_stream(seed, row).choice(avail, size=k, replace=False)
        out.append(sorted(int(p) for p in picks))
    return out


def build_random(n_blocks: int, r: int, seed: int, forbidden: BlockMask) -> BlockMask:
    rows = random_block_indices(n_blocks, r, seed, forbidden)
    return BlockMask.from_neighbors(n_blocks, rows)


def bigbird_components(cfg: BlockPatternConfig) -> tuple[BlockMask, BlockMask, BlockMask]:
    """(window, global, random) over the ordinary blocks.

    In ETC mode the global component is empty here: globals live in the
    prepended blocks added by :func:`build_bigbird`.
    """
    nb = cfg.n_blocks
    window = build_window(nb, cfg.window_blocks)
    g_itc = cfg.global_blocks if cfg.mode is Mode.ITC else 0
    glob = build_global_itc(nb, g_itc)
    rand = build_random(nb, cfg.random_blocks, cfg.seed, window.union(glob))
    return window, glob, rand


def build_bigbird(cfg: BlockPatternConfig) -> BlockMask:
    """Union of window, global and random blocks.

    ITC returns an ``n_blocks`` square mask.  ETC returns a mask over
    ``global_blocks + n_blocks`` blocks whose first ``global_blocks`` rows and
    columns are full.
    """
    window, glob, rand = bigbird_components(cfg)
    body = window.adjacency | glob.adjacency | rand.adjacency
    if cfg.mode is Mode.ITC:
        return BlockMask(body)
    return BlockMask(_extend(body, cfg.global_blocks))


def _extend(adj: np.ndarray, g: int) -> np.ndarray:
    n = adj.shape[0]
    out = np.zeros((n + g, n + g), dtype=bool)
    out[:g, :] = True
    out[:, :g] = True
    out[g:, g:] = adj
    return out


def expand_to_tokens(m: BlockMask, b: int) -> TokenMask:
    if b < 1:
        raise PatternError("block size must be positive")
    return TokenMask(np.kron(m.adjacency, np.ones((b, b), dtype=bool)).astype(bool))


def extend_etc(a: TokenMask, g_tokens: int) -> TokenMask:
    """Prepend ``g_tokens`` global tokens that see and are seen by everyone."""
    if g_tokens < 0:
        raise PatternError("g_tokens must be non-negative")
    return TokenMask(_extend(a.adjacency, g_tokens))


def build_star(n: int) -> TokenMask:
    """Star on nodes ``0..n`` centred at 0, with self-edges everywhere."""
    if n < 1:
        raise PatternError("star graph needs n >= 1")
    adj = np.eye(n + 1, dtype=bool)
    adj[0, :] = True
    adj[:, 0] = True
    return TokenMask(adj)


def build_turing_decoder_graph(n_nodes: int, literal_self_loops: bool = False) -> EdgeList:
    """Causal decoder graph over ``n_nodes`` steps.

    For row ``j >= 1`` with base ``t = j(j+1)/2`` and ``1 <= k <= j+1``, node
    ``t + k`` attends to ``k(k+1)/2`` and to its predecessor ``t + k - 1``.

    With ``literal_self_loops=True`` the locality edge for ``k > 1`` is the
    self-loop ``(t+k, t+k)`` instead of the predecessor.
    """
    if n_nodes < 1:
        raise PatternError("decoder graph needs at least one node")
    edges = set()
    j = 1
    while j * (j + 1) // 2 + 1 < n_nodes:
        base = j * (j + 1) // 2
        for k in range(1, j + 2):
            src = base + k
            if src >= n_nodes:
                break
            edges.add((src, k * (k + 1) // 2))
            if k > 1 and literal_self_loops:
                edges.add((src, src))
            else:
                edges.add((src, src - 1))
        j += 1
    return EdgeList(n_nodes, tuple(sorted(edges)))


# -- serialization ---------------------------------------------------------

def to_pbm(m: _Mask) -> str:
    adj = m.adjacency.astype(np.uint8)
    lines = ["P1", f"{adj.shape[1]} {adj.shape[0]}"]
    lines.extend(" ".join(map(str, row)) for row in adj)
    return "\n".join(lines) + "\n"


def _pbm_tokens(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        yield from line.split()


def from_pbm(text: str, kind=TokenMask):
    toks = _pbm_tokens(text)
    magic = next(toks, None)
    if magic != "P1":
        raise ValueError(f"not a plain PBM (magic {magic!r})")
    try:
        width, height = int(next(toks)), int(next(toks))
    except StopIteration:
        raise ValueError("truncated PBM header") from None
    # plain PBM allows pixels without separators
    bits = "".join(toks)
    if len(bits) != width * height or set(bits) - {"0", "1"}:
        raise ValueError("PBM payload does not match its header")
    adj = np.frombuffer(bits.encode(), dtype=np.uint8).reshape(height, width) == ord("1")
    return kind(adj)


def to_csv(m: _Mask) -> str:
    n = m.size
    lines = [f"# {MASK_CSV_SCHEMA} rows={n} cols={n}", "row,col"]
    rows, cols = np.nonzero(m.adjacency)
    lines.extend(f"{i},{j}" for i, j in zip(rows.tolist(), cols.tolist()))
    return "\n".join(lines) + "\n"


def from_csv(text: str, kind=TokenMask):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("mask CSV is missing its schema header")
    fields = dict(f.split("=", 1) for f in lines[0][1:].split() if "=" in f)
    if MASK_CSV_SCHEMA not in lines[0]:
        raise ValueError(f"unsupported mask CSV schema: {lines[0]!r}")
    rows, cols = int(fields["rows"]), int(fields["cols"])
    if lines[1:2] != ["row,col"]:
        raise ValueError("mask CSV is missing the row,col header")
    adj = np.zeros((rows, cols), dtype=bool)
    for line in lines[2:]:
        if line.strip():
            i, j = line.split(",")
            adj[int(i), int(j)] = True
    return kind(adj)
