"""Time the k-NN reward kernels under both backends.

    python benchmarks/bench_knn.py --sizes 256 1024 4096 --xi 12

Also checks that the two backends agree bit-for-bit on every input.
"""
import argparse
import timeit

import numpy as np

from cim import _kernels


def _inputs(n, dim, seed):
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((n, dim))
    z = rng.standard_normal((n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return phi, z, np.zeros(n, dtype=np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 4096])
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--xi", type=int, default=12)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    kernels = {
        "projected": lambda phi, z, g, b: _kernels.projected_neighbours(phi, z, g, args.xi, b),
        "euclidean": lambda phi, z, g, b: _kernels.euclidean_neighbours(phi, args.xi, b),
    }
    print(f"{'kernel':<10} {'n':>6} " + " ".join(f"{b + ' ms':>10}" for b in backends) + "   speedup  identical")
    for name, fn in kernels.items():
        for n in args.sizes:
            phi, z, g = _inputs(n, args.dim, n)
            outs, times = {}, {}
            for b in backends:
                outs[b] = fn(phi, z, g, b)  # warm-up (and numba compilation)
                times[b] = min(timeit.repeat(lambda: fn(phi, z, g, b), number=1, repeat=args.repeat)) * 1e3
            same = all(outs[b][0].tobytes() == outs["numpy"][0].tobytes() for b in backends)
            speed = f"{times['numpy'] / times['numba']:8.1f}x" if "numba" in times else "       -"
            print(f"{name:<10} {n:>6} " + " ".join(f"{times[b]:>10.2f}" for b in backends) + f"  {speed}  {same}")


if __name__ == "__main__":
    main()
