"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from unpadbert import kernels


def cases(rng):
    n, dim, vocab = 200_000, 64, 30522
    grad = rng.standard_normal((n, dim))
    ids = rng.integers(0, vocab, size=n).astype(np.int64)
    order = rng.permutation(n).astype(np.int64)
    sorted_pos = np.argsort(ids, kind="stable").astype(np.int64)
    sorted_ids = np.ascontiguousarray(ids[sorted_pos])
    buf = rng.standard_normal(8_000_000)
    starts = np.arange(0, len(buf), 2048, dtype=np.int64)
    stops = np.minimum(starts + 2048, len(buf)).astype(np.int64)
    return {
        "chunk_sumsq": lambda k: k.chunk_sumsq(buf, starts, stops),
        "scatter_accumulate": lambda k: k.scatter_accumulate(grad, ids, order, 2, np.zeros((vocab, dim))),
        "segment_sum_sorted": lambda k: k.segment_sum_sorted(grad, sorted_pos, sorted_ids, np.zeros((vocab, dim))),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    backends = {"numpy": kernels.fallback}
    if kernels.compiled is not None:
        backends["compiled"] = kernels.compiled
    else:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':<20} {'backend':<9} {'best ms':>9} {'speedup':>8}")
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        base = None
        for label, mod in backends.items():
            best = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
            base = base or best
            print(f"{name:<20} {label:<9} {best:9.2f} {base / best:8.2f}x")


if __name__ == "__main__":
    main()
