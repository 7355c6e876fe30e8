"""Compare the compiled and numpy kernels on Beaver multiply-accumulate.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes follow a secure matmul with one triple per multiply-accumulate: the
router's hidden layer, the tiny and large expert layers, and a pool-sized
selection row.
"""
import argparse
import timeit

import numpy as np

from mpcroute import kernels

SHAPES = {
    "router 1x8x16": (1, 8, 16),
    "tiny 1x32x16": (1, 32, 16),
    "large 1x32x256": (1, 32, 256),
    "select 1x3x9000": (1, 3, 9000),
    "batch 64x32x64": (64, 32, 64),
}


def operands(shape, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 2**64, size=shape, dtype=np.uint64) for _ in range(5)]


def run(repeat: int) -> list:
    mask = np.uint64(2**64 - 1)
    rows = []
    for label, shape in SHAPES.items():
        ops = operands(shape)
        times = {}
        outs = {}
        for name in ("python", "native"):
            if name == "native" and not kernels.native_available():
                continue
            kernels.set_backend(name)
            outs[name] = kernels.beaver_mac(*ops, True, mask)
            n = max(1, int(2e6 // np.prod(shape)))
            times[name] = min(timeit.repeat(lambda: kernels.beaver_mac(*ops, True, mask),
                                            number=n, repeat=repeat)) / n
        if "native" in outs:
            assert np.array_equal(outs["python"], outs["native"]), label
        rows.append((label, times))
    kernels.set_backend("native" if kernels.native_available() else "python")
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'shape':<18}{'python us':>12}{'native us':>12}{'ratio':>8}")
    for label, t in run(args.repeat):
        py = t["python"] * 1e6
        if "native" in t:
            nat = t["native"] * 1e6
            print(f"{label:<18}{py:>12.1f}{nat:>12.1f}{py / nat:>8.2f}")
        else:
            print(f"{label:<18}{py:>12.1f}{'n/a':>12}{'':>8}")


if __name__ == "__main__":
    main()
