"""Time the prior-sample SSE kernel (the LML hot loop) with and without numba.

    python benchmarks/bench_kernels.py [--samples 100000] [--repeats 3]

Prints samples/second for each backend and their ratio.  Run with
BNNP_DISABLE_NUMBA=1 to confirm the fallback path is picked up.
"""

import argparse
import time

import numpy as np

from bnnp import _kernels
from bnnp.priors import standard_init
from bnnp.evaluation import sample_prior_flat


def best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--points", type=int, default=30)
    p.add_argument("--widths", default="1,20,20,1")
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()

    widths = tuple(int(w) for w in args.widths.split(","))
    rng = np.random.default_rng(0)
    w = sample_prior_flat(standard_init(widths), rng, args.samples)
    x = rng.uniform(-4, 4, (args.points, widths[0]))
    y = rng.standard_normal((args.points, widths[-1]))

    backends = ["numpy"]
    if _kernels.numba_available():
        _kernels.sse(w[:2], x, y, widths, backend="numba")  # compile outside the timing
        backends.append("numba")
    else:
        print("numba unavailable or disabled; timing the numpy path only")

    rates = {}
    for b in backends:
        t = best_time(lambda: _kernels.sse(w, x, y, widths, backend=b), args.repeats)
        rates[b] = args.samples / t
        print(f"{b:>6}: {rates[b]:12.0f} samples/s  ({t:.3f} s for {args.samples})")
    if len(rates) == 2:
        print(f"speed-up: {rates['numba'] / rates['numpy']:.2f}x")


if __name__ == "__main__":
    main()
