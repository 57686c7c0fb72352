"""Compare the compiled and numpy Laplacian kernels.

    python benchmarks/bench_kernels.py [--nside 16 32 64] [--channels 32] [--repeat 20]
"""

import argparse
import time

import numpy as np

from bayescmb import kernels
from bayescmb.graph import build_graph


def timeit(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nside", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.compiled_available():
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'nside':>6} {'rows':>6} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8} {'max |diff|':>11}")
    rng = np.random.default_rng(0)
    for nside in args.nside:
        g = build_graph(nside)
        x = rng.standard_normal((args.channels, g.n_nodes))
        z = rng.standard_normal(x.shape)
        out_np = np.empty_like(x)
        out_c = np.empty_like(x)

        def run_np():
            kernels.lap_combine_numpy(x, g.nbr, g.w, g.degree, 0.5, -1.0, out_np, z, -1.0)

        t_np = timeit(run_np, args.repeat)
        if kernels.compiled_available():
            from bayescmb import _lapkernel

            def run_c():
                _lapkernel.lap_combine(x, g.nbr, g.w, g.degree, 0.5, -1.0, out_c, z, -1.0)

            t_c = timeit(run_c, args.repeat)
            diff = float(np.max(np.abs(out_np - out_c)))
            print(f"{nside:>6} {args.channels:>6} {1e3 * t_np:>10.3f} {1e3 * t_c:>12.3f} {t_np / t_c:>8.2f} {diff:>11.2e}")
        else:
            print(f"{nside:>6} {args.channels:>6} {1e3 * t_np:>10.3f} {'-':>12} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()
