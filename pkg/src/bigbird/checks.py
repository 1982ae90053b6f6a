"""Verification suites behind ``bigbird check``.

Each suite returns a :class:`SuiteResult` whose text is deterministic for a
given seed (no timings), so two runs can be compared byte for byte.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attn_block import attn_block_sparse
from .attn_ref import Hardmax, HeadParams, Softmax, attn_dense, furthest_brute_force, furthest_vector
from .encoder import LayerParams, flatten_grads, flatten_layers, grad_check, layer_loss_and_grad, unflatten_layers
from .graphdiag import clustering_coefficient, path_stats, spectral_gap
from .pattern import BlockPatternConfig, Mode, build_bigbird, build_turing_decoder_graph, build_window, expand_to_tokens
from .theory import GridConfig, decoder_step, enumerate_codes, is_contextual_mapping

__all__ = [
    "SuiteResult",
    "SUITES",
    "sample_pattern_configs",
    "brute_force_decoder_edges",
    "random_unit_instance",
    "run_suite",
]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float | None = None
    lines: list[str] = field(default_factory=list)
    failing: str | None = None

    def render(self) -> str:
        head = f"[{'PASS' if self.passed else 'FAIL'}] {self.name}"
        if self.worst is not None:
            head += f"  worst={self.worst:.3e}"
        out = [head] + [f"    {ln}" for ln in self.lines]
        if self.failing:
            out.append(f"    failing case: {self.failing}")
        return "\n".join(out)


def sample_pattern_configs(rng, count, max_tokens=1024, etc=True):
    """Random valid configs: b in {4,8,16,32}, w in {1,3,5}, r in 0..3, g in 0..2."""
    out = []
    while len(out) < count:
        b = int(rng.choice([4, 8, 16, 32]))
        nb = int(rng.integers(max(2, 64 // b), max_tokens // b + 1))
        w = int(rng.choice([1, 3, 5]))
        r = int(rng.integers(0, 4))
        g = int(rng.integers(0, 3))
        mode = Mode.ETC if etc and rng.random() < 0.5 else Mode.ITC
        if g + w + r > nb:
            continue
        out.append(BlockPatternConfig(nb * b, b, w, r, g, mode, seed=int(rng.integers(0, 2**63))))
    return out


def _equivalence(seed, count=20, d=8, m=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    cfgs = sample_pattern_configs(rng, count, max_tokens=512)
    for i, cfg in enumerate(cfgs):
        kind = Softmax() if i % 2 == 0 else Hardmax()
        X = rng.standard_normal((cfg.total_tokens, d))
        heads = [HeadParams.random(d, m, rng, 0.5) for _ in range(2)]
        ref = attn_dense(X, heads, expand_to_tokens(build_bigbird(cfg), cfg.block_size), kind)
        got = attn_block_sparse(X, heads, cfg, kind)
        err = float(np.abs(got - ref).max() / np.abs(ref).max())
        worst = max(worst, err)
        if not err <= 1e-10:
            return SuiteResult("equivalence", False, worst, failing=f"{cfg} kind={kind} err={err:.3e}")
    return SuiteResult("equivalence", True, worst, [f"{len(cfgs)} configs, blocked vs dense, bound 1e-10"])


def _gradcheck(seed, eps=1e-5):
    rng = np.random.default_rng(seed)
    cfg = BlockPatternConfig(8, 2, 1, 1, 1, seed=seed)
    mask = expand_to_tokens(build_bigbird(cfg), cfg.block_size)
    p = LayerParams.random(4, 4, 8, rng)
    X = rng.standard_normal((8, 4))
    theta = flatten_layers([p])

    def loss(t):
        return layer_loss_and_grad(X, unflatten_layers(t, [p])[0], mask)[0]

    def grad(t):
        return flatten_grads([layer_loss_and_grad(X, unflatten_layers(t, [p])[0], mask)[1]])

    err = grad_check(loss, grad, theta, eps=eps, seed=seed)
    ok = err <= 1e-4
    return SuiteResult(
        "gradcheck",
        ok,
        err,
        [f"1 layer, d=4 m=4 q=8 n=8, {theta.size} params, eps={eps:g}, bound 1e-4"],
        None if ok else f"{cfg} seed={seed}",
    )


def _theory():
    lines, ok = [], True
    for n, d, delta in ((1, 1, Fraction(1, 2)), (1, 1, Fraction(1, 3)), (2, 1, Fraction(1, 2))):
        cfg = GridConfig(n, d, delta)
        try:
            table = enumerate_codes(cfg)
            inj = is_contextual_mapping(table)
        except AssertionError as exc:
            return SuiteResult("theory", False, lines=lines, failing=f"{cfg}: {exc}")
        ok &= inj
        lines.append(f"n={n} d={d} delta={delta}: {len(table)} inputs, {len(table) * n} codes, injective={inj}")
    return SuiteResult("theory", ok, lines=lines)


def _graphs(seed):
    lines, ok = [], True
    diam_ok = all(
        path_stats(build_bigbird(BlockPatternConfig(nb, 1, 1, 0, 1)))[1] <= 2 for nb in range(2, 257)
    )
    lines.append(f"diameter <= 2 with one global block, n_blocks 2..256: {diam_ok}")
    a32 = path_stats(build_window(32, 3))[0]
    a128 = path_stats(build_window(128, 3))[0]
    ratio = a128 / a32
    lin_ok = abs(ratio - 4.0) <= 0.2
    lines.append(f"window-only avg path 128 vs 32 blocks: ratio {ratio:.4f}")
    ring = build_window(10, 5)
    cc = clustering_coefficient(ring)
    lines.append(f"ring lattice n=10 two per side clustering: {cc:.6f}")
    gap_err = max(abs(spectral_gap(np.ones((n, n), dtype=bool)) - 1 / (n - 1)) for n in (8, 32, 128))
    lines.append(f"K_n |lambda_2| max error: {gap_err:.3e}")
    ok = diam_ok and lin_ok and cc == 0.5 and gap_err <= 1e-8
    return SuiteResult("graphs", ok, gap_err, lines)


def brute_force_decoder_edges(n_nodes: int) -> set[tuple[int, int]]:
    """Both edge families by scanning every (j, k), independent of the builder."""
    edges = set()
    for j in range(1, n_nodes + 1):
        tri = j * (j + 1) // 2
        if tri + 1 >= n_nodes:
            break
        for k in range(1, j + 2):
            s = tri + k
            if s >= n_nodes:
                continue
            edges.add((s, k * (k + 1) // 2))
            edges.add((s, s - 1))
    return edges


def random_unit_instance(rng, n):
    d = max(1, math.ceil(math.log2(n) ** 2)) if n > 1 else 1
    U = rng.standard_normal((n, d))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def _furthest(seed, count=50):
    rng = np.random.default_rng(seed)
    checked = ties = 0
    for _ in range(count):
        n = int(rng.integers(1, 65))
        U = random_unit_instance(rng, n)
        res = furthest_vector(U)
        brute = furthest_brute_force(U)
        for i, r in enumerate(res):
            if r.tie:
                ties += 1
                continue
            checked += 1
            if r.index != brute[i] or not np.allclose(r.vector, U[brute[i]], atol=1e-12):
                return SuiteResult("furthest", False, failing=f"seed={seed} n={n} row={i}")
    return SuiteResult("furthest", True, lines=[f"{count} instances, {checked} rows agree, {ties} ties flagged"])


def _decoder():
    edges = set(build_turing_decoder_graph(500).edges)
    same = edges == brute_force_decoder_edges(500)
    forward = sum(1 for u, v in edges if v > u)
    g_ok = all(decoder_step(j * (j + 1) // 2) == j for j in range(1001))
    ok = same and forward == 0 and g_ok
    return SuiteResult(
        "decoder-graph", ok, lines=[f"500 nodes: {len(edges)} edges, matches enumeration={same}, forward edges={forward}"]
    )


SUITES = ("equivalence", "gradcheck", "theory", "graphs")


def run_suite(name: str, seed: int = 0) -> list[SuiteResult]:
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, seed)]
    if name == "equivalence":
        return [_equivalence(seed)]
    if name == "gradcheck":
        return [_gradcheck(seed)]
    if name == "theory":
        return [_theory(), _furthest(seed), _decoder()]
    if name == "graphs":
        return [_graphs(seed)]
    raise KeyError(name)
