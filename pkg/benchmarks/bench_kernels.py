"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--lengths 1024,4096] [--trials 5] [--csv out.csv]

Times the blocked attention call and the all-pairs BFS on the same inputs
under each available backend and prints median milliseconds.
"""
import argparse
import csv
import statistics
import sys
import time

import numpy as np

from bigbird import kernels
from bigbird.attn_block import attn_block_sparse
from bigbird.attn_ref import HeadParams, practical_softmax
from bigbird.graphdiag import _csr, undirected
from bigbird.pattern import BlockPatternConfig, build_bigbird


def median_ms(fn, trials):
    fn()  # warmup
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def cases(lengths, block, dim, seed):
    rng = np.random.default_rng(seed)
    for n in lengths:
        cfg = BlockPatternConfig(n, block, 3, 3, 2, seed=seed)
        X = rng.standard_normal((n, dim))
        head = HeadParams.random(dim, dim, rng, 1 / np.sqrt(dim))
        kind = practical_softmax(dim)
        yield f"attention n={n}", lambda X=X, head=head, cfg=cfg, kind=kind: attn_block_sparse(X, [head], cfg, kind)
        nb = n // 4
        sym = undirected(build_bigbird(BlockPatternConfig(nb, 1, 3, 2, 1, seed=seed)))
        indptr, indices = _csr(sym)
        yield f"bfs nodes={nb}", lambda indptr=indptr, indices=indices, nb=nb: kernels.bfs_all_pairs(indptr, indices, nb)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default="1024,2048,4096")
    ap.add_argument("--block", type=int, default=64)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    lengths = [int(x) for x in args.lengths.split(",")]
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available", file=sys.stderr)
    rows = []
    before = kernels.get_backend()
    for name, fn in cases(lengths, args.block, args.dim, args.seed):
        row = {"case": name}
        for b in backends:
            kernels.set_backend(b)
            row[b] = median_ms(fn, args.trials)
        rows.append(row)
    kernels.set_backend(before)

    header = f"{'case':<22}" + "".join(f"{b + ' ms':>14}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for r in rows:
        line = f"{r['case']:<22}" + "".join(f"{r[b]:>14.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{r['python'] / r['compiled']:>9.2f}x"
        print(line)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["case", *backends])
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
