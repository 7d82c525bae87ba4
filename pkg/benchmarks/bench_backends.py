"""Time the PHM kernels on each available backend.

    python benchmarks/bench_backends.py [--rows 40] [--repeat 200]

Shapes follow the adapter projections of the parity config and a T5-base
sized down-projection (k=768, d=24, n=4).
"""

import argparse
import timeit

import numpy as np

from kpft import backend

SHAPES = {
    "parity down (k=32 d=8 n=2)": (2, 16, 4),
    "parity up (k=8 d=32 n=2)": (2, 4, 16),
    "t5 down (k=768 d=24 n=4)": (4, 192, 6),
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--rows", type=int, default=40)
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    gen = np.random.default_rng(0)
    print(f"{'shape':<28} {'backend':<8} {'fwd us':>9} {'bwd us':>9}")
    for label, (n, p, q) in SHAPES.items():
        a, b = gen.normal(size=(n, n, n)), gen.normal(size=(n, p, q))
        x, g = gen.normal(size=(args.rows, n * p)), gen.normal(size=(args.rows, n * q))
        for name in backend.available():
            with backend.use(name):
                fwd = min(timeit.repeat(lambda: backend.phm_forward(a, b, x), number=args.repeat, repeat=3))
                bwd = min(timeit.repeat(lambda: backend.phm_backward(a, b, x, g), number=args.repeat, repeat=3))
            print(f"{label:<28} {name:<8} {1e6 * fwd / args.repeat:>9.1f} {1e6 * bwd / args.repeat:>9.1f}")


if __name__ == "__main__":
    main()
