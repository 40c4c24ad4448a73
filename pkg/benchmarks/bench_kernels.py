"""Benchmark the compiled kernels against their numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

PHYSIO_RECON_PURE=1 is applied internally for the fallback half, so one
invocation prints both backends side by side.
"""

import importlib
import os
import time

import numpy as np


def timeit(fn, repeat=20):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench(kernels, label):
    rng = np.random.default_rng(0)
    # seq2seq block 0 at production scale: T=600, window 4, step 1, d=500
    x = rng.normal(size=(600, 500))
    starts = np.arange(0, 597, dtype=np.int64)
    feats = kernels.gather_windows(x, starts, 4)
    # RV at 400 Hz over a 14.4 min scan, 6 s windows at 1200 TRs
    resp = rng.normal(size=346_000)
    centers = (np.arange(1200) * 0.72 * 400).astype(np.int64)
    lo = np.clip(centers - 1200, 0, None)
    hi = np.clip(centers + 1200, None, len(resp))

    rows = [
        ("gather_windows (600x500, W=4, 597 windows)", timeit(lambda: kernels.gather_windows(x, starts, 4))),
        ("scatter_add_windows (same shape)", timeit(lambda: kernels.scatter_add_windows(feats, starts, 600))),
        ("windowed_std (346k samples, 1200 windows)", timeit(lambda: kernels.windowed_std(resp, lo, hi))),
    ]
    print(f"\n{label} backend ({kernels.BACKEND})")
    for name, dt in rows:
        print(f"  {name:<50s} {dt * 1e3:8.3f} ms")
    return {name: dt for name, dt in rows}


def main():
    os.environ.pop("PHYSIO_RECON_PURE", None)
    from physio_recon import kernels

    importlib.reload(kernels)
    compiled = bench(kernels, "compiled") if kernels.BACKEND == "compiled" else None

    os.environ["PHYSIO_RECON_PURE"] = "1"
    importlib.reload(kernels)
    fallback = bench(kernels, "pure-python/numpy")

    os.environ.pop("PHYSIO_RECON_PURE", None)
    importlib.reload(kernels)

    if compiled:
        print("\nspeedup (numpy fallback time / compiled time)")
        for name in compiled:
            print(f"  {name:<50s} {fallback[name] / compiled[name]:8.2f}x")
    else:
        print("\ncompiled backend unavailable; only the fallback was timed")


if __name__ == "__main__":
    main()
