"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--threads T]

Each row reports the best-of-N wall time per backend, the speedup, and the
largest absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from lfmkit import kernels


def cases(rng):
    A, S, K = 11, 15, 31
    n = A * S
    x = rng.random((n, n))
    cls = ((np.arange(n)[:, None] % A) * 3 // A * 3 + (np.arange(n)[None, :] % A) * 3 // A).astype(np.int32)
    ker = rng.random((9, K, K))
    gx, gy = rng.uniform(-2, n + 2, 2_000_000), rng.uniform(-2, n + 2, 2_000_000)
    tmpl, ref = rng.random((48, 48)), rng.random((160, 160))
    return {
        "sv_conv_forward 165x165 k31 9cls": lambda b: kernels.sv_conv_forward(x, cls, ker, backend=b),
        "sv_conv_adjoint 165x165 k31 9cls": lambda b: kernels.sv_conv_adjoint(x, cls, ker, backend=b),
        "bin_points 2e6 rays": lambda b: kernels.bin_points(gx, gy, 1.0, (n, n), backend=b)[0],
        "ncc_valid 48 in 160": lambda b: kernels.ncc_valid(tmpl, ref, backend=b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    a = ap.parse_args(argv)
    kernels.set_threads(a.threads)
    try:
        kernels.backend_module("compiled")
        backends = ("python", "compiled")
    except ImportError:
        print("compiled kernels unavailable; timing the fallback only")
        backends = ("python",)
    print(f"{'kernel':36s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup   max|diff|")
    for name, fn in cases(np.random.default_rng(0)).items():
        times, outs = [], []
        for b in backends:
            outs.append(fn(b))
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=a.repeat)))
        row = f"{name:36s} " + " ".join(f"{t * 1e3:8.1f}ms" for t in times)
        if len(backends) == 2:
            row += f"   {times[0] / times[1]:6.1f}x   {np.max(np.abs(outs[0] - outs[1])):.2e}"
        print(row)


if __name__ == "__main__":
    main()
