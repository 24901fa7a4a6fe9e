"""Compiled kernels vs the numpy fallback, on calibration-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from qvdit import _kernels_py as py_k

try:
    from qvdit import _kernels as cy_k
except ImportError:  # extension not built
    cy_k = None


def cases(rng):
    w = rng.standard_normal((256, 64)) * 0.2
    x = rng.standard_normal((512, 256))
    u = rng.standard_normal((512, 256)) * 2
    s, z = py_k.row_params(w, 3)
    _, t = py_k.gelu(u)
    return {
        "row_params (256x64, 3b)": lambda k: k.row_params(w, 3),
        "fake_quant_rows (256x64)": lambda k: k.fake_quant_rows(w, s, z, 3),
        "fake_quant_rows_grad (256x64)": lambda k: k.fake_quant_rows_grad(w, s, z, 3),
        "fake_quant_dynamic (512x256, 6b)": lambda k: k.fake_quant_dynamic(x, 6),
        "gelu (512x256)": lambda k: k.gelu(u),
        "gelu_grad (512x256)": lambda k: k.gelu_grad(u, t),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.Generator(np.random.Philox(0))
    print(f"{'kernel':<36}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py_k), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if cy_k is None:
            print(f"{name:<36}{t_py:>12.1f}{'n/a':>12}{'':>10}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy_k), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<36}{t_py:>12.1f}{t_cy:>12.1f}{t_py / t_cy:>9.2f}x")


if __name__ == "__main__":
    main()
