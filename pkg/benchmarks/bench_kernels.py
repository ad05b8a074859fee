"""Compare the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scenario]

Each kernel is checked for agreement before it is timed. ``--scenario``
also times a full-scale ATS run under each backend in a subprocess (the
backend is chosen at import time from FOGSIM_DISABLE_JIT).
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from fogsim import _kernels as K


def _best(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    lats = rng.uniform(-37.83, -37.80, 2000)
    lons = rng.uniform(144.94, 144.98, 2000)
    n = 120
    w = np.full((n, n), np.inf)
    for i in range(n):
        for j in rng.choice(n, 4, replace=False):
            if i != j:
                w[i, j] = w[j, i] = float(rng.uniform(1, 100))
        if i:
            w[i, i - 1] = w[i - 1, i] = float(rng.uniform(1, 100))
    np.fill_diagonal(w, 0.0)
    dist = K.NUMPY_KERNELS["floyd_warshall"](w)
    return {
        "haversine_to_many": (-37.81, 144.96, lats, lons),
        "pairwise_haversine": (lats[:400], lons[:400]),
        "nearest_index": (-37.81, 144.96, lats, lons),
        "floyd_warshall": (w,),
        "next_hops": (w, dist, 1e-9),
    }


def bench_kernels(repeat):
    if K.NUMBA_KERNELS is None:
        print("numba unavailable; nothing to compare")
        return []
    rows = []
    for name, args in cases(np.random.default_rng(0)).items():
        a = K.NUMPY_KERNELS[name](*args)
        b = K.NUMBA_KERNELS[name](*args)
        if isinstance(a, tuple):
            assert a[0] == b[0] and abs(a[1] - b[1]) < 1e-9, name
        else:
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9, err_msg=name)
        t_np = _best(K.NUMPY_KERNELS[name], args, repeat)
        t_nb = _best(K.NUMBA_KERNELS[name], args, repeat)
        rows.append((name, t_np, t_nb))
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, t_np, t_nb in rows:
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}")
    return rows


def bench_scenario():
    for flag in ("0", "1"):
        env = dict(os.environ, FOGSIM_DISABLE_JIT=flag)
        with tempfile.TemporaryDirectory() as out:
            t0 = time.perf_counter()
            subprocess.run([sys.executable, "-m", "fogsim", "run", "--scenario", "ats", "--scale", "full",
                            "--seed", "0", "--out", out], env=env, check=True, stdout=subprocess.DEVNULL)
            wall = time.perf_counter() - t0
            with open(os.path.join(out, "footprint.json")) as fh:
                fp = json.load(fh)
        label = "numpy" if flag == "1" else "numba"
        print(f"full ATS [{label}]: process {wall:.2f} s, in-run {fp['wall_clock_s']:.2f} s, "
              f"peak RSS {fp['peak_rss_mb']:.0f} MB")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--scenario", action="store_true")
    args = p.parse_args(argv)
    bench_kernels(args.repeat)
    if args.scenario:
        bench_scenario()


if __name__ == "__main__":
    main()
