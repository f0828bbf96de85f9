"""Compare the compiled codec kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--ctus 64] [--repeats 3]

Both backends must return identical costs; the script exits 1 otherwise.
"""

import argparse
import sys
import time

import numpy as np

from cupart.codec import COST_MODEL, kernels


def _blocks(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if i % 2:
            b = rng.integers(0, 256, (64, 64))
        else:
            b = np.kron(rng.integers(0, 256, (8, 8)), np.ones((8, 8))) + rng.integers(0, 6, (64, 64))
        out.append(np.ascontiguousarray(b, dtype=np.int32))
    return out


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        res = fn()
        best = min(best, time.perf_counter() - t0)
    return best, res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ctus", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--qp", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available")
    blocks = _blocks(args.ctus, args.seed)
    lam = COST_MODEL.lagrangian(args.qp)
    dec = np.random.default_rng(args.seed).integers(0, 3, (args.ctus, 21)).astype(np.int8)
    results = {}
    for name, be in backends.items():
        t_or, r_or = _time(lambda: [be.oracle_ctu(b, lam, 32, 1, 0.3) for b in blocks], args.repeats)
        t_gu, r_gu = _time(lambda: [be.guided_ctu(b, d, lam, 32, 1, 0.3) for b, d in zip(blocks, dec)],
                           args.repeats)
        results[name] = (r_or, r_gu)
        print(f"{name:7s} oracle {1e3 * t_or / args.ctus:9.3f} ms/CTU   "
              f"guided {1e3 * t_gu / args.ctus:9.3f} ms/CTU")
    if len(results) == 2:
        (co, cg), (po, pg) = results["cython"], results["python"]
        same = all(a[0] == b[0] and np.array_equal(a[1], b[1]) for a, b in zip(co, po))
        same &= all(a[0] == b[0] for a, b in zip(cg, pg))
        print("identical results:", same)
        return 0 if same else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
