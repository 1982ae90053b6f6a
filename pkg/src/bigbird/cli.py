"""``bigbird`` command line: mask dumps, graph diagnostics, benchmarks,
verification suites and small theory demos.

Exit codes: 0 success, 1 runtime failure (I/O, failed check), 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import statistics
import sys
import tempfile
import time

import numpy as np

from . import checks, kernels
from .attn_block import attn_block_sparse, flop_count
from .attn_ref import HeadParams, attn_dense, furthest_brute_force, furthest_vector, practical_softmax
from .graphdiag import graph_report
from .pattern import (
    BlockPatternConfig,
    Mode,
    PatternError,
    build_bigbird,
    build_turing_decoder_graph,
    expand_to_tokens,
    to_csv,
    to_pbm,
)
from .theory import ShiftParams, selective_shift, shift_as_attention

BENCH_CSV_SCHEMA = "bigbird-bench-csv/1"
BENCH_COLUMNS = ("n", "dense_flops", "sparse_flops", "ratio", "dense_wall_ms", "sparse_wall_ms")
# block length 64 with g=2, w=3, r=3 blocks
PAPER_PRESET = dict(block=64, window=3, random=3, global_=2)

FURTHEST_DEMO = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])


class UsageError(Exception):
    pass


def write_atomic(text: str, path: str | None) -> None:
    """Write to ``path`` via a temp file in the same directory and rename; ``None`` or ``-`` is stdout."""
    if path in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".bigbird-", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _add_pattern_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tokens", type=int, required=True, help="sequence length n")
    p.add_argument("--block", type=int, required=True, help="block size b")
    p.add_argument("--window", type=int, default=3, help="window width in blocks (odd)")
    p.add_argument("--random", type=int, default=0, help="random blocks per row")
    p.add_argument("--global", dest="global_", type=int, default=0, help="global blocks")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="itc")
    p.add_argument("--seed", type=int, default=0)


def _config(args) -> BlockPatternConfig:
    try:
        return BlockPatternConfig(
            args.tokens, args.block, args.window, args.random, args.global_, Mode(args.mode), args.seed
        )
    except PatternError as exc:
        raise UsageError(str(exc)) from None


def cmd_pattern(args) -> int:
    cfg = _config(args)
    mask = expand_to_tokens(build_bigbird(cfg), cfg.block_size)
    write_atomic(to_pbm(mask) if args.format == "pbm" else to_csv(mask), args.output)
    return 0


def cmd_diag(args) -> int:
    cfg = _config(args)
    blocks = build_bigbird(cfg)
    mask = blocks if args.level == "block" else expand_to_tokens(blocks, cfg.block_size)
    rep = graph_report(mask)
    if args.json:
        text = rep.to_json() + "\n"
    else:
        text = "".join(f"{k}: {v}\n" for k, v in rep.to_dict().items())
    write_atomic(text, args.output)
    return 0


def _parse_lengths(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--lengths must be comma separated integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise UsageError("--lengths needs at least one positive length")
    return out


def _median_ms(fn, trials: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_rows(lengths, block, window, random, global_, dim, trials, warmup=1, seed=0):
    """One dict per length with the CSV columns; wall columns are None when trials == 0."""
    rows = []
    for n in lengths:
        try:
            cfg = BlockPatternConfig(n, block, window, random, global_, Mode.ITC, seed)
        except PatternError as exc:
            raise UsageError(f"length {n}: {exc}") from None
        rep = flop_count(cfg, dim)
        row = dict(n=n, dense_flops=rep.dense_flops, sparse_flops=rep.sparse_flops, ratio=rep.ratio,
                   dense_wall_ms=None, sparse_wall_ms=None)
        if trials > 0:
            rng = np.random.default_rng(seed)
            X = rng.standard_normal((n, dim))
            head = HeadParams.random(dim, dim, rng, 1.0 / np.sqrt(dim))
            kind = practical_softmax(dim)
            dense_mask = expand_to_tokens(build_bigbird(cfg), block)
            row["dense_wall_ms"] = _median_ms(lambda: attn_dense(X, [head], dense_mask, kind), trials, warmup)
            row["sparse_wall_ms"] = _median_ms(lambda: attn_block_sparse(X, [head], cfg, kind), trials, warmup)
        rows.append(row)
    return rows


def format_bench_csv(rows, meta: str) -> str:
    lines = [f"# {BENCH_CSV_SCHEMA} {meta}", ",".join(BENCH_COLUMNS)]
    for r in rows:
        cells = []
        for c in BENCH_COLUMNS:
            v = r[c]
            if v is None:
                cells.append("")
            elif c == "ratio":
                cells.append(repr(float(v)))
            elif c.endswith("_ms"):
                cells.append(f"{v:.3f}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    if args.trials < 0:
        raise UsageError("--trials must be >= 0")
    if args.preset == "paper":
        block, window, random, global_ = (PAPER_PRESET[k] for k in ("block", "window", "random", "global_"))
    else:
        if args.block is None:
            raise UsageError("--preset custom needs --block")
        block, window, random, global_ = args.block, args.window, args.random, args.global_
    rows = bench_rows(_parse_lengths(args.lengths), block, window, random, global_, args.dim, args.trials,
                      args.warmup, args.seed)
    meta = (f"preset={args.preset} b={block} w={window} r={random} g={global_} d={args.dim} "
            f"trials={args.trials} backend={kernels.get_backend()}")
    write_atomic(format_bench_csv(rows, meta), args.csv)
    return 0


def cmd_check(args) -> int:
    results = checks.run_suite(args.suite, args.seed)
    text = "\n".join(r.render() for r in results) + "\n"
    ok = all(r.passed for r in results)
    text += f"{'ALL PASS' if ok else 'FAILED'} ({sum(r.passed for r in results)}/{len(results)})\n"
    write_atomic(text, args.output)
    return 0 if ok else 1


def _demo_furthest(args) -> list[str]:
    U = FURTHEST_DEMO
    out = ["inputs:"] + [f"  u{i + 1} = {tuple(float(x) for x in u)}" for i, u in enumerate(U)]
    res = furthest_vector(U)
    brute = furthest_brute_force(U)
    agree = True
    out.append("furthest (1-based):")
    for i, r in enumerate(res):
        if r.tie:
            out.append(f"  {i + 1}* -> tie (several furthest vectors)")
            continue
        ok = r.index == brute[i]
        agree &= ok
        out.append(f"  {i + 1}* -> {r.index + 1}   brute force {brute[i] + 1}  {'ok' if ok else 'MISMATCH'}")
    out.append(f"oracle agreement on non-tied rows: {agree}")
    if not agree:
        raise RuntimeError("\n".join(out))
    return out


def _demo_shift(args) -> list[str]:
    rng = np.random.default_rng(args.seed)
    n, d = args.tokens, 3
    X = rng.integers(-4, 5, size=(n, d)).astype(np.float64)
    u = np.array([1.0, 2.0, 4.0])
    graph = expand_to_tokens(build_bigbird(BlockPatternConfig(n, 1, 1, 0, 1)), 1)
    p = ShiftParams(u, args.b1, args.b2, args.rho, graph)
    proj = X @ u
    out_rows = selective_shift(X, p)
    shifted = np.flatnonzero((proj >= args.b1) & (proj <= args.b2))
    out = [f"u = {tuple(float(x) for x in u)}  range [{args.b1:g}, {args.b2:g}]  rho = {args.rho:g}", "rows (projection -> new x0):"]
    for i in range(n):
        mark = "*" if i in shifted else " "
        out.append(f" {mark} row {i}: u.x = {proj[i]:g}  x0 {X[i, 0]:g} -> {out_rows[i, 0]:g}")
    out.append(f"{len(shifted)} rows shifted")
    if np.any(np.isin(proj, [args.b1, args.b2])):
        out.append("attention check skipped: a projection sits on a range bound")
    else:
        err = float(np.abs(shift_as_attention(X, p) - out_rows).max())
        out.append(f"attention realization agrees: {err <= 1e-9} (max abs diff {err:.3e})")
        if err > 1e-9:
            raise RuntimeError("\n".join(out))
    return out


def _demo_turing(args) -> list[str]:
    if args.nodes < 1:
        raise UsageError("--nodes must be >= 1")
    edges = build_turing_decoder_graph(args.nodes).edges
    same = set(edges) == checks.brute_force_decoder_edges(args.nodes)
    out = [f"decoder graph on {args.nodes} nodes, {len(edges)} edges (src -> dst):"]
    out += [f"  {u} -> {v}" for u, v in edges]
    out.append(f"matches enumeration: {same}")
    if not same:
        raise RuntimeError("\n".join(out))
    return out


def cmd_demo(args) -> int:
    fn = {"furthest": _demo_furthest, "shift": _demo_shift, "turing-graph": _demo_turing}[args.which]
    write_atomic("\n".join(fn(args)) + "\n", args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bigbird", description=__doc__.splitlines()[0])
    parser.add_argument("--kernel", choices=["auto", *kernels.available_backends()], default="auto",
                        help="attention/BFS kernel backend")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pattern", help="dump an expanded token mask")
    _add_pattern_flags(p)
    p.add_argument("--format", choices=["pbm", "csv"], default="pbm")
    p.add_argument("-o", "--output", help="output path (default stdout)")
    p.set_defaults(func=cmd_pattern)

    p = sub.add_parser("diag", help="graph diagnostics of a pattern")
    _add_pattern_flags(p)
    p.add_argument("--json", action="store_true", help="emit GraphReport JSON")
    p.add_argument("--level", choices=["block", "token"], default="block")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("bench", help="FLOP counts and wall times, dense vs blocked")
    p.add_argument("--lengths", default="1024,2048,4096")
    p.add_argument("--preset", choices=["paper", "custom"], default="paper")
    p.add_argument("--block", type=int)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--random", type=int, default=3)
    p.add_argument("--global", dest="global_", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="output path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check", help="run verification suites")
    p.add_argument("--suite", choices=[*checks.SUITES, "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("demo", help="small worked examples")
    p.add_argument("--which", choices=["furthest", "shift", "turing-graph"], required=True)
    p.add_argument("--nodes", type=int, default=15)
    p.add_argument("--tokens", type=int, default=6)
    p.add_argument("--b1", type=float, default=-10.5)
    p.add_argument("--b2", type=float, default=10.5)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        kernels.set_backend(args.kernel)
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"bigbird {args.command}: error: {exc}\n")
    except (OSError, RuntimeError, ValueError) as exc:
        sys.stderr.write(f"bigbird {args.command}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
