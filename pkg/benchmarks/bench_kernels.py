"""Numba vs pure-numpy kernels, then end-to-end design evaluation under each backend.

    python benchmarks/bench_kernels.py [--designs 300] [--repeat 5]

The end-to-end part re-runs this script in a child process with
MCCM_DISABLE_JIT set, since the backend is chosen at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import time
import timeit

import numpy as np


def kernel_timings(repeat: int) -> dict:
    from mccm import kernels
    from mccm.descriptors import load_cnn

    cnn = load_cnn("xception")
    arr = cnn.arrays
    F, OH, OW = arr.filters, arr.out_h, arr.out_w
    R = arr.reduction
    pe = 1800
    cands = [kernels.candidate_factors(v, pe) for v in (F, OH, OW)]
    rng = np.random.default_rng(0)
    lat = rng.integers(1, 10_000, size=64)
    tiles = rng.integers(1, 200, size=64)

    cases = {
        "best_parallelism (74 layers, 1800 PEs)": lambda b: kernels.best_parallelism(F, OH, OW, R, *cands, pe, backend=b),
        "stage_maxima (64 CEs)": lambda b: kernels.stage_maxima(lat, tiles, backend=b),
        "walk_blocks (256x56x56, red 1152)": lambda b: kernels.walk_blocks(256, 56, 56, 1152, 16, 4, 4, backend=b),
    }
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    out = {}
    for name, fn in cases.items():
        row = {}
        for b in backends:
            fn(b)  # compile / warm up
            n, _ = timeit.Timer(lambda: fn(b)).autorange()
            best = min(timeit.repeat(lambda: fn(b), number=n, repeat=repeat)) / n
            row[b] = best
        out[name] = row
    return out


def end_to_end(designs: int) -> dict:
    from mccm import kernels
    from mccm.descriptors import load_cnn, load_platform
    from mccm.dse import CUSTOM, DesignSpaceConfig, enumerate_family, explore
    from mccm.composer import evaluate

    cnn = load_cnn("xception")
    platform = load_platform("vcu110")
    evaluate(enumerate_family("Segmented", 4, cnn), cnn, platform)
    cfg = DesignSpaceConfig(families=(CUSTOM,), sample_size=designs, rng_seed=3)
    t0 = time.perf_counter()
    explore(cfg, cnn, platform, baselines=False)
    return {"backend": kernels.BACKEND, "ms_per_design": 1e3 * (time.perf_counter() - t0) / designs}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--designs", type=int, default=300)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--e2e-only", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.e2e_only:
        print(json.dumps(end_to_end(args.designs)))
        return

    print("kernel timings (best of repeats, microseconds per call)")
    for name, row in kernel_timings(args.repeat).items():
        cells = "  ".join(f"{b}={t * 1e6:10.1f}" for b, t in row.items())
        speedup = row["numpy"] / row["numba"] if "numba" in row else float("nan")
        print(f"  {name:42s} {cells}  speedup={speedup:6.1f}x")

    print(f"\nend-to-end, {args.designs} custom designs on XCeption/VCU110")
    for disable in ("0", "1"):
        env = dict(os.environ, MCCM_DISABLE_JIT=disable)
        res = subprocess.run([sys.executable, __file__, "--e2e-only", "--designs", str(args.designs)],
                             env=env, capture_output=True, text=True, check=True)
        r = json.loads(res.stdout)
        print(f"  {r['backend']:6s} {r['ms_per_design']:7.2f} ms/design")


if __name__ == "__main__":
    main()
