"""Time the compiled and pure-Python kernel backends side by side.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from gazedetr._kernels import compiled_backend, python_backend


def cases(rng):
    x = rng.standard_normal((32, 16, 32, 32))
    cols = python_backend.im2col(x, 3, 3, 2, 1)
    costs = [rng.random((n, 16)) for n in (1, 3, 5, 8)]
    return {
        "im2col 32x16x32x32 k3 s2": lambda b: b.im2col(x, 3, 3, 2, 1),
        "col2im 32x16x32x32 k3 s2": lambda b: b.col2im(cols, x.shape, 3, 3, 2, 1),
        "assignment n<=8 x 16": lambda b: [b.solve_assignment(c) for c in costs],
        "assignment 7x7 x 32": lambda b: [b.solve_assignment(c[:, :7]) for c in costs[3:] for _ in range(32)],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("python", python_backend)]
    if compiled_backend is not None:
        backends.append(("cython", compiled_backend))
    else:
        print("compiled backend not built; timing the Python fallback only")
    print(f"{'kernel':28s} " + " ".join(f"{n:>12s}" for n, _ in backends) + "   speedup")
    for name, fn in cases(rng).items():
        times = []
        for _, b in backends:
            t = min(timeit.repeat(lambda: fn(b), repeat=args.repeat, number=args.number)) / args.number
            times.append(t)
        speed = f"{times[0] / times[1]:8.2f}x" if len(times) == 2 else ""
        print(f"{name:28s} " + " ".join(f"{t * 1e3:10.3f}ms" for t in times) + "  " + speed)


if __name__ == "__main__":
    main()
