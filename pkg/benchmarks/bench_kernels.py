"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from lupi import kernels
from lupi.bounds import RELU, MaxPool, enumerate_paths


def cases():
    r = np.random.default_rng(0)
    h, s, e, g = (r.normal(size=64 * 128), r.uniform(0, 4, 64 * 128), r.normal(size=64 * 128),
                  r.normal(size=64 * 128))
    net = [r.normal(size=(12, 10)), RELU, r.normal(size=(10, 12)), RELU, MaxPool(2), r.normal(size=(8, 5)), RELU,
           r.normal(size=(6, 8))]
    x = r.normal(size=10)
    return {
        "dropout_forward 64x128": lambda: kernels.dropout_forward(h, s, e),
        "dropout_backward 64x128": lambda: kernels.dropout_backward(g, h, s, e),
        "enumerate_paths 10-12-10-5-8-6": lambda: enumerate_paths(net, x),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    table = {}
    for name in backends:
        kernels.use(name)
        for label, fn in cases().items():
            best = min(timeit.repeat(fn, repeat=args.repeat, number=args.number)) / args.number
            table.setdefault(label, {})[name] = best
    print(f"{'case':34s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, row in table.items():
        line = f"{label:34s}" + "".join(f"{row[b] * 1e6:12.1f}us" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:11.1f}x"
        print(line)
    if len(backends) == 1:
        print("compiled kernels not built; only the fallback was timed")


if __name__ == "__main__":
    main()
