"""Benchmark the MaxSim retrieval kernels: numba (sequential and parallel)
against the pure-numpy fallback and a naive Python double loop.

The numpy fallback is what `COLBERT_LAB_DISABLE_NUMBA=1` selects at import
time; here both implementations are called directly so one process can
compare them. Run:

    python benchmarks/bench_maxsim.py [--docs 2000] [--repeat 5]
"""

import argparse
import time

import numpy as np

from colbert_lab import kernels


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def naive_python(q, doc_rows, offsets):
    out = np.empty(offsets.shape[0] - 1)
    for j in range(offsets.shape[0] - 1):
        total = 0.0
        for t in range(q.shape[0]):
            best = -np.inf
            for r in range(offsets[j], offsets[j + 1]):
                best = max(best, float(np.dot(q[t], doc_rows[r])))
            total += best
        out[j] = total
    return out


def timeit(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--docs", type=int, default=2000)
    parser.add_argument("--doc-len", type=int, default=55)
    parser.add_argument("--query-len", type=int, default=39)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--naive", action="store_true", help="include the slow Python loop")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    q = unit_rows(rng, args.query_len, args.dim)
    doc_rows = unit_rows(rng, args.docs * args.doc_len, args.dim)
    offsets = np.arange(args.docs + 1, dtype=np.int64) * args.doc_len

    rows = []
    ref = kernels._maxsim_many_numpy(q, doc_rows, offsets)
    t_np, _ = timeit(lambda: kernels._maxsim_many_numpy(q, doc_rows, offsets), args.repeat)
    rows.append(("numpy fallback", t_np, 0.0))

    if kernels.HAS_NUMBA:
        out = np.empty(args.docs)
        kernels._maxsim_many_seq(q, doc_rows, offsets, out)  # compile before timing
        t_seq, _ = timeit(
            lambda: kernels._maxsim_many_seq(q, doc_rows, offsets, out), args.repeat
        )
        rows.append(("numba sequential", t_seq, float(np.abs(out - ref).max())))
        kernels.set_threads(2)
        kernels._maxsim_many_par(q, doc_rows, offsets, out)
        t_par, _ = timeit(
            lambda: kernels._maxsim_many_par(q, doc_rows, offsets, out), args.repeat
        )
        rows.append(("numba parallel", t_par, float(np.abs(out - ref).max())))
    else:
        print("numba unavailable or disabled; timing the fallback only")

    if args.naive:
        t_naive, naive = timeit(lambda: naive_python(q, doc_rows, offsets), 1)
        rows.append(("naive python", t_naive, float(np.abs(naive - ref).max())))

    flops = 2.0 * args.docs * args.doc_len * args.query_len * args.dim
    print(
        f"\nscoring {args.query_len} query rows against {args.docs} docs "
        f"x {args.doc_len} rows, dim {args.dim} (best of {args.repeat})\n"
    )
    print(f"{'kernel':<18} {'seconds':>10} {'GFLOP/s':>9} {'max |diff| vs numpy':>21}")
    for name, secs, diff in rows:
        print(f"{name:<18} {secs:>10.4f} {flops / secs / 1e9:>9.2f} {diff:>21.2e}")


if __name__ == "__main__":
    main()
