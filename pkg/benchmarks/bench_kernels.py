"""Compiled vs numpy nearest-code search and cluster sums.

Usage: python3 benchmarks/bench_kernels.py [--frames N] [--codes V] [--dim D] [--repeat R]

Prints the best-of-R wall time of each backend and checks that both return
bit-identical results.
"""

import argparse
import timeit

import numpy as np

from codec_resynth import _kernels_py

try:
    from codec_resynth import _kernels
except ImportError:  # extension not built
    _kernels = None


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=20000)
    p.add_argument("--codes", type=int, default=256)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.frames, args.dim))
    codes = rng.standard_normal((args.codes, args.dim))
    assign = rng.integers(0, args.codes, args.frames)
    print(f"frames={args.frames} codes={args.codes} dim={args.dim} (best of {args.repeat})")

    backends = {"numpy": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not built; numpy only")
    results, times = {}, {}
    for name, impl in backends.items():
        results[name] = (impl.nearest_code(x, codes), impl.cluster_sums(x, assign, args.codes))
        times[name] = (
            min(timeit.repeat(lambda: impl.nearest_code(x, codes), number=1, repeat=args.repeat)),
            min(timeit.repeat(lambda: impl.cluster_sums(x, assign, args.codes), number=1, repeat=args.repeat)),
        )
        print(f"{name:7s} nearest_code {times[name][0] * 1e3:9.2f} ms   cluster_sums {times[name][1] * 1e3:8.2f} ms")
    if "cython" in results:
        (ia, da), (sa, ca) = results["numpy"]
        (ib, db), (sb, cb) = results["cython"]
        same = np.array_equal(ia, ib) and np.array_equal(da, db) and np.array_equal(sa, sb) and np.array_equal(ca, cb)
        print(f"speedup nearest_code x{times['numpy'][0] / times['cython'][0]:.1f}, "
              f"cluster_sums x{times['numpy'][1] / times['cython'][1]:.1f}; bit-identical: {same}")


if __name__ == "__main__":
    main()
