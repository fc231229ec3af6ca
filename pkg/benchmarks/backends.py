"""Numba vs numpy kernel timings for the hot loops.

    python3 benchmarks/backends.py [--reps 5] [--C 48] [--quick]

Every kernel is first checked for agreement between the two backends, then
timed (median of ``reps`` calls after a JIT-warming call). Prints one row per
(kernel, size) with both timings and the numpy / numba ratio.
"""
import argparse
import time

import numpy as np

from laformer import _kernels


def median_time(fn, reps):
    fn()  # compile / warm caches
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def cases(C, quick):
    rng = np.random.default_rng(0)
    tokens = (1024, 4096) if quick else (1024, 4096, 16384, 65536)
    for N in tokens:
        q, k, v = (rng.standard_normal((N, C)) for _ in range(3))
        yield "linear_attention", N, lambda q=q, k=k, v=v: _kernels.linear_attention(q, k, v)[0]
    sides = (32,) if quick else (32, 64, 128)
    for s in sides:
        x = rng.standard_normal((1, s, s, C))
        w = rng.standard_normal((5, 5, C)) * 0.1
        yield "depthwise_5x5", s * s, lambda x=x, w=w: _kernels.depthwise_conv2d(x, w)
    for n in ((256,) if quick else (256, 1024)):
        m = rng.standard_normal((n, C))
        yield "jacobi_sv", n, lambda m=m: _kernels.jacobi_singular_values(m)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--C", type=int, default=48)
    ap.add_argument("--quick", action="store_true", help="small sizes only")
    args = ap.parse_args()
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':18s} {'N':>7s} " + " ".join(f"{b + ' s':>12s}" for b in backends)
          + f" {'ratio':>7s} {'max|diff|':>10s}")
    for name, N, fn in cases(args.C, args.quick):
        out, t = {}, {}
        for b in backends:
            with _kernels.use_backend(b):
                out[b] = np.asarray(fn())
                t[b] = median_time(fn, args.reps)
        diff = max(float(np.max(np.abs(out[b] - out[backends[-1]]))) for b in backends)
        ratio = t["numpy"] / t["numba"] if "numba" in t else float("nan")
        print(f"{name:18s} {N:7d} " + " ".join(f"{t[b]:12.3e}" for b in backends)
              + f" {ratio:7.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
