"""Time the compiled sparse kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 20000] [--deg 20] [--dim 64]

Prints one line per kernel with the median wall time of each backend and the
speed-up. Needs the extension built (``pip install -e . --no-build-isolation``).
"""

import argparse
import timeit

import numpy as np

from slifmr import kernels
from slifmr.kernels import CSRPattern


def random_graph(rows, deg, seed=0):
    rng = np.random.default_rng(seed)
    r = np.repeat(np.arange(rows), rng.poisson(deg, rows))
    c = rng.integers(rows, size=len(r))
    pattern, _ = CSRPattern.from_coo(rows, rows, r, c)
    return pattern


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--deg", type=int, default=20)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled kernels unavailable; only the fallback can be timed")
    pattern = random_graph(args.rows, args.deg)
    rng = np.random.default_rng(1)
    w = rng.random(pattern.nnz).astype(np.float32)
    x = rng.normal(size=(args.rows, args.dim)).astype(np.float32)
    g = rng.normal(size=(args.rows, args.dim)).astype(np.float32)
    s = rng.normal(size=pattern.nnz).astype(np.float32)
    pattern.transpose_plan()  # cached; keep it out of the timings

    cases = {
        "spmm": lambda b: kernels.spmm(pattern, w, x, b),
        "spmm_transpose": lambda b: kernels.spmm_transpose(pattern, w, g, b),
        "edge_dot": lambda b: kernels.edge_dot(pattern, g, x, b),
        "segment_softmax": lambda b: kernels.segment_softmax(pattern.row_offsets, s, b),
        "segment_sum": lambda b: kernels.segment_sum(pattern.row_offsets, s, b),
    }
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"rows={args.rows} nnz={pattern.nnz} dim={args.dim}")
    print(f"{'kernel':<16} " + " ".join(f"{b + ' ms':>11}" for b in backends) + "   speed-up")
    for name, fn in cases.items():
        times = []
        for b in backends:
            fn(b)
            runs = timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)
            times.append(1e3 * float(np.median(runs)))
        speed = f"{times[0] / times[1]:9.1f}x" if len(times) == 2 else ""
        print(f"{name:<16} " + " ".join(f"{t:11.2f}" for t in times) + f"  {speed}")


if __name__ == "__main__":
    main()
