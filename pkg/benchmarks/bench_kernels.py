"""Compare the compiled and numpy kernels on the same inputs.

Usage: python benchmarks/bench_kernels.py [--events N] [--repeat R]
"""

import argparse
import time

import numpy as np

from tagcorr import _pykernels

try:
    from tagcorr import _ckernels
except ImportError:
    _ckernels = None


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=10**7, help="events per stream")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.events
    horizon = 10 * 10**12  # 10 s at 1 ps
    a = np.sort(rng.integers(0, horizon, n))
    b = np.sort(a + 1_000 + rng.integers(-200, 200, n))
    bin_w, nbins = 5, 20_000  # +-50 ns
    lo = -nbins * bin_w // 2
    # dense bursts so the dead-time loop has clusters to resolve
    t = np.sort(rng.integers(0, n * 20_000, n))
    dead = 25_000

    backends = [("python", _pykernels)]
    if _ckernels is not None:
        backends.insert(0, ("cython", _ckernels))
    else:
        print("compiled extension not built; timing the numpy fallback only")

    results = {}
    for name, mod in backends:
        th, hist = _best(lambda: mod.coincidence_counts(a, b, lo, bin_w, nbins), args.repeat)
        td, mask = _best(lambda: mod.dead_time_mask(t, dead), args.repeat)
        results[name] = (hist, mask)
        print(f"{name:7s} histogram {th:8.3f} s ({2 * n / th / 1e6:7.1f} Mev/s)   "
              f"dead time {td:8.3f} s")

    if len(results) == 2:
        (h1, m1), (h2, m2) = results.values()
        print("outputs identical:", bool(np.array_equal(h1, h2) and np.array_equal(m1, m2)))


if __name__ == "__main__":
    main()
